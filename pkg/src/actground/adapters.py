"""Backbone lookup: fixture files, seeded toys and named adapter plugins."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Callable

from .backbone import InvalidInputError, ViTBackbone, load_toy_backbone, make_toy_backbone

FIXTURE_ROOT_ENV = "ACTGROUND_FIXTURE_ROOT"

# dims of the built-in ``seed:<n>`` toy: deep enough for the default K = 7
TOY_DIMS = dict(
    layer_count=8,
    embed_dim=16,
    head_count=2,
    patch_grid=(4, 4),
    patch_size=4,
    native_frames=8,
    joint_dim=12,
    mlp_dim=32,
)

_ADAPTERS: dict[str, Callable[[str | None], ViTBackbone]] = {}


def register_adapter(name: str, factory: Callable[[str | None], ViTBackbone]) -> None:
    """Register ``factory(argument)`` under ``adapter:<name>[:argument]``."""
    _ADAPTERS[name] = factory


def available_adapters() -> list[str]:
    return sorted(_ADAPTERS)


def fixture_path(path) -> Path:
    path = Path(path)
    root = os.environ.get(FIXTURE_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def resolve_backbone(spec, base_dir=None):
    """Backbone instance for a config value (instances pass through)."""
    if not isinstance(spec, (str, os.PathLike)):
        return spec
    spec = str(spec)
    if spec.startswith("seed:"):
        try:
            seed = int(spec[5:])
        except ValueError as exc:
            raise InvalidInputError(f"bad toy seed in {spec!r}") from exc
        return make_toy_backbone(seed, **TOY_DIMS)
    if spec.startswith("adapter:"):
        name, _, arg = spec[8:].partition(":")
        if name not in _ADAPTERS:
            raise InvalidInputError(
                f"unknown backbone adapter {name!r}; registered: {available_adapters() or 'none'}"
            )
        return _ADAPTERS[name](arg or None)
    path = fixture_path(spec)
    if base_dir is not None and not path.is_absolute() and not path.exists():
        path = Path(base_dir) / path
    return load_toy_backbone(path)


def _hf_clip(arg):
    from .hf_clip import HFClipBackbone

    return HFClipBackbone.from_pretrained(arg or "openai/clip-vit-base-patch16")


register_adapter("hf-clip", _hf_clip)
