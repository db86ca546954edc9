from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

from actground.adapters import TOY_DIMS
from actground.backbone import FrameBatch, make_toy_backbone

FIXTURES = Path(__file__).parent / "fixtures"
sys.path.insert(0, str(Path(__file__).parent))


def random_frames(count, size, seed=0):
    rng = np.random.default_rng(seed)
    return tuple(rng.integers(0, 256, size=(*size, 3), dtype=np.uint8) for _ in range(count))


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def small_backbone():
    """L=4, d=8, h=2, 2x2 patch grid of 4px patches, image backbone."""
    return make_toy_backbone(42, layer_count=4, embed_dim=8, head_count=2)


@pytest.fixture(scope="session")
def e2e_backbone():
    return make_toy_backbone(42, **TOY_DIMS)


@pytest.fixture(scope="session")
def small_trace(small_backbone):
    batch = FrameBatch(random_frames(2, small_backbone.descriptor.input_size, seed=3), 1)
    return small_backbone.forward_with_trace(batch)


@pytest.fixture(scope="session")
def e2e_trace(e2e_backbone):
    batch = FrameBatch(random_frames(8, e2e_backbone.descriptor.input_size, seed=5), 4)
    return e2e_backbone.forward_with_trace(batch)


# -- acceptance ledger ---------------------------------------------------------------

SUITE_BUDGET_S = 60.0
_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}
_SESSION_START = [0.0]


def pytest_sessionstart(session):
    import time

    _SESSION_START[0] = time.perf_counter()


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.notes = number, title, []

    def note(self, text):
        self.notes.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            status = "PASS"
        elif exc_type.__name__ == "Skipped":
            status = "SKIP"
            self.notes.append(str(exc))
        else:
            status = "FAIL"
            self.notes.append(f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        _ACCEPTANCE[self.number] = (status, self.title, "; ".join(self.notes))
        return False


@pytest.fixture
def criterion():
    return _Criterion


def _suite_runtime():
    import time

    return time.perf_counter() - _SESSION_START[0]


def pytest_sessionfinish(session, exitstatus):
    if 7 in _ACCEPTANCE and _suite_runtime() > SUITE_BUDGET_S:
        status, title, notes = _ACCEPTANCE[7]
        _ACCEPTANCE[7] = ("FAIL", title, notes + f"; suite took {_suite_runtime():.1f}s")
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, notes = _ACCEPTANCE[number]
        if number == 7 and status == "PASS":
            notes += f"; suite runtime {_suite_runtime():.1f}s < {SUITE_BUDGET_S:.0f}s"
        terminalreporter.write_line(f"criterion {number} {status}: {title} ({notes})")
