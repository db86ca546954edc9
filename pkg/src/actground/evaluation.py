"""Annotation ingestion, pointing-game accuracy and layer ablation sweeps."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

UNION_POLICIES = ("single", "union", "hull")
SWEEP_MODES = ("remove_layer", "depth")
CSV_HEADER = "setting,accuracy,n"


class AnnotationError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        loc = f"{path}:" if path else ""
        loc += f"line {line}: " if line is not None else ""
        super().__init__(loc + message)
        self.line = line


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    role: str | None = None

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self.as_list()}")

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def to_json(self) -> dict:
        d = {"x_min": self.x_min, "y_min": self.y_min, "x_max": self.x_max, "y_max": self.y_max}
        if self.role is not None:
            d["role"] = self.role
        return d


@dataclass(frozen=True)
class AnnotationRecord:
    sample_id: str
    media_path: str
    labeled_frame_index: int
    label: str
    boxes: tuple[BoundingBox, ...]
    union_policy: str = "single"

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if not self.boxes:
            raise ValueError("a record needs at least one box")
        if self.labeled_frame_index < 0:
            raise ValueError("labeled_frame_index must be non-negative")
        if self.union_policy not in UNION_POLICIES:
            raise ValueError(f"union_policy must be one of {UNION_POLICIES}")
        if self.union_policy == "single" and len(self.boxes) != 1:
            raise ValueError(f"union_policy 'single' needs exactly one box, got {len(self.boxes)}")

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "media_path": self.media_path,
            "labeled_frame_index": self.labeled_frame_index,
            "label": self.label,
            "boxes": [b.to_json() for b in self.boxes],
            "union_policy": self.union_policy,
        }


_REQUIRED = ("sample_id", "media_path", "labeled_frame_index", "label", "boxes")


def _parse_box(raw) -> BoundingBox:
    if isinstance(raw, Mapping):
        return BoundingBox(
            float(raw["x_min"]), float(raw["y_min"]), float(raw["x_max"]), float(raw["y_max"]),
            raw.get("role"),
        )
    if isinstance(raw, (list, tuple)) and len(raw) == 4:
        return BoundingBox(*(float(v) for v in raw))
    raise ValueError(f"cannot read box {raw!r}")


def parse_record(obj: Mapping) -> AnnotationRecord:
    if not isinstance(obj, Mapping):
        raise ValueError("record must be a JSON object")
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise ValueError(f"missing required field(s): {', '.join(missing)}")
    frame = obj["labeled_frame_index"]
    if isinstance(frame, bool) or not isinstance(frame, int):
        raise ValueError("labeled_frame_index must be an integer")
    if not isinstance(obj["boxes"], list):
        raise ValueError("boxes must be a list")
    return AnnotationRecord(
        sample_id=str(obj["sample_id"]),
        media_path=str(obj["media_path"]),
        labeled_frame_index=frame,
        label=str(obj["label"]),
        boxes=tuple(_parse_box(b) for b in obj["boxes"]),
        union_policy=obj.get("union_policy", "single"),
    )


def load_annotations(path) -> list[AnnotationRecord]:
    """Read a JSON Lines annotation file; blank lines are skipped."""
    path = Path(path)
    records = []
    seen = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = parse_record(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise AnnotationError(str(exc), line=lineno, path=path) from exc
            if rec.sample_id in seen:
                raise AnnotationError(f"duplicate sample_id {rec.sample_id!r}", line=lineno, path=path)
            seen.add(rec.sample_id)
            records.append(rec)
    return records


def dump_annotations(records: Sequence[AnnotationRecord], path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
    return path


def point_in_box(point, record: AnnotationRecord) -> bool:
    """Boundary-inclusive hit test under the record's union policy."""
    x, y = float(point[0]), float(point[1])
    if record.union_policy == "hull":
        hull = BoundingBox(
            min(b.x_min for b in record.boxes),
            min(b.y_min for b in record.boxes),
            max(b.x_max for b in record.boxes),
            max(b.y_max for b in record.boxes),
        )
        return hull.contains(x, y)
    return any(b.contains(x, y) for b in record.boxes)


@dataclass
class EvalReport:
    correct: dict[str, bool]
    accuracy: float
    breakdown: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.correct)

    def to_json(self) -> str:
        return json.dumps(
            {
                "accuracy": self.accuracy,
                "n": self.n,
                "correct": dict(sorted(self.correct.items())),
                "breakdown": dict(sorted(self.breakdown.items())),
                "metadata": self.metadata,
            },
            indent=2,
            sort_keys=True,
        ) + "\n"


def accuracy(predictions: Mapping, records: Sequence[AnnotationRecord], primary: str = "dec") -> EvalReport:
    """Pointing-game accuracy.

    ``predictions`` maps sample ids to a point or to a ``{mode: point}``
    mapping (e.g. verb/obj/act/dec); ``primary`` picks the headline mode.
    """
    if not records:
        raise ValueError("no records to evaluate")
    by_id = {r.sample_id: r for r in records}
    missing = sorted(set(by_id) - set(predictions))
    extra = sorted(set(predictions) - set(by_id))
    if missing or extra:
        raise ValueError(f"predictions and records do not match: missing={missing} unexpected={extra}")
    hits: dict[str, dict[str, bool]] = {}
    for sid in sorted(by_id):
        pred = predictions[sid]
        modes = dict(pred) if isinstance(pred, Mapping) else {primary: pred}
        for mode, point in modes.items():
            hits.setdefault(mode, {})[sid] = point_in_box(point, by_id[sid])
    if primary not in hits:
        primary = sorted(hits)[0]
    headline = hits[primary]
    if len(headline) != len(by_id):
        raise ValueError(f"mode {primary!r} is missing for some samples")
    breakdown = {m: float(Fraction(sum(v.values()), len(v))) for m, v in hits.items()}
    policies: dict[str, int] = {}
    for r in records:
        policies[r.union_policy] = policies.get(r.union_policy, 0) + 1
    return EvalReport(
        correct=dict(headline),
        accuracy=float(Fraction(sum(headline.values()), len(headline))),
        breakdown=breakdown,
        metadata={"primary_mode": primary, "union_policies": dict(sorted(policies.items()))},
    )


def sweep_settings(mode: str, values: Sequence[int], depth: int) -> list[int]:
    """Validate sweep values against the configured pathway depth.

    ``remove_layer`` indices run from 1 (final layer) to depth + 1 (the
    pathway input X^(L-K)); ``depth`` values run from 0 to the configured depth.
    """
    if mode not in SWEEP_MODES:
        raise ValueError(f"sweep mode must be one of {SWEEP_MODES}, got {mode!r}")
    values = [int(v) for v in values]
    if not values:
        raise ValueError("empty sweep range")
    lo, hi = (1, depth + 1) if mode == "remove_layer" else (0, depth)
    bad = [v for v in values if not lo <= v <= hi]
    if bad:
        raise ValueError(f"{mode} values {bad} outside [{lo}, {hi}] for depth {depth}")
    return values


def ablation_sweep(grounder, records: Sequence[AnnotationRecord], mode: str, values: Sequence[int], root=None) -> list[tuple[int, float, int]]:
    """Accuracy per sweep setting; ``grounder`` is a fitted ActionGrounder."""
    values = sweep_settings(mode, values, grounder.depth)
    rows = []
    traces = grounder.trace_records(records, root=root)
    for v in values:
        kwargs = {"removed_layer": v} if mode == "remove_layer" else {"depth": v}
        preds = {
            rec.sample_id: grounder.ground_trace(traced, rec.label, **kwargs).prediction_modes()
            for rec, traced in zip(records, traces)
        }
        report = accuracy(preds, records)
        rows.append((v, report.accuracy, report.n))
    return rows


def format_sweep_csv(rows) -> str:
    lines = [CSV_HEADER]
    lines += [f"{setting},{acc:.6f},{n}" for setting, acc, n in rows]
    return "\n".join(lines) + "\n"
