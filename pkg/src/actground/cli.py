"""Command line entry point: ``actground ground|eval|sweep|make-fixture``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .backbone import CorruptFixtureError, InvalidInputError, make_toy_backbone
from .config import ConfigError, RunConfig, load_config
from .estimator import PROMPT_KEYS, ActionGrounder, GroundingQuery
from .evaluation import (
    SWEEP_MODES,
    AnnotationError,
    ablation_sweep,
    accuracy,
    format_sweep_csv,
    load_annotations,
    sweep_settings,
)
from .grounding import MediaError, MediaSource, sample_frames, write_heatmap_png, write_heatmap_raw, write_overlay

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_range(text: str) -> list[int]:
    """``"0..7"`` (inclusive) or a comma separated list."""
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split("..", 1))
            if hi < lo:
                raise ValueError("empty range")
            return list(range(lo, hi + 1))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --range {text!r}: {exc}") from exc


def _config(path) -> RunConfig:
    try:
        return load_config(path)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _grounder(cfg: RunConfig, config_path) -> ActionGrounder:
    backbone = cfg.backbone
    if not backbone.startswith(("seed:", "adapter:")) and config_path is not None:
        from .adapters import fixture_path

        candidate = fixture_path(backbone)
        if not candidate.is_absolute() and not candidate.exists():
            candidate = Path(config_path).parent / backbone
        if not candidate.exists():
            raise UsageError(f"config field 'backbone': fixture {backbone!r} not found")
        backbone = str(candidate)
    try:
        return ActionGrounder(backbone=backbone, **cfg.estimator_params()).fit()
    except CorruptFixtureError as exc:
        raise DataError(str(exc)) from exc
    except (ValueError, InvalidInputError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_ground(args) -> int:
    cfg = _config(args.config)
    grounder = _grounder(cfg, args.config)
    out = Path(args.out or cfg.output_dir)
    try:
        media = MediaSource.open(args.media)
        batch = sample_frames(media, args.frame, cfg.num_frames, cfg.frame_mode)
        result = grounder.ground(GroundingQuery(batch, args.label))
    except (MediaError, IndexError) as exc:
        raise DataError(str(exc)) from exc
    except InvalidInputError as exc:
        raise DataError(str(exc)) from exc
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    maps = dict(result.heatmaps)
    if result.merged is not None:
        maps["merged"] = result.merged
    for key, hm in maps.items():
        write_heatmap_png(hm, out / f"heatmap_{key}.png")
        write_heatmap_raw(hm, out / f"heatmap_{key}.f32")
        write_overlay(batch.target_frame, hm, out / f"overlay_{key}.png")
        files[key] = {"png": f"heatmap_{key}.png", "raw": f"heatmap_{key}.f32", "overlay": f"overlay_{key}.png"}
    record = result.to_json_dict()
    record.update(
        media=Path(args.media).name,
        labeled_frame=args.frame,
        heatmaps=files,
        config=cfg.render(),
    )
    _write_json(out / "result.json", record)
    print(json.dumps({k: record[k] for k in ("c_verb", "c_obj", "c_act", "c_dec", "prediction")}))
    return EXIT_OK


def _records(path):
    try:
        records = load_annotations(path)
    except (AnnotationError, OSError) as exc:
        raise DataError(str(exc)) from exc
    if not records:
        raise DataError(f"{path}: no annotation records")
    return records


def cmd_eval(args) -> int:
    cfg = _config(args.config)
    grounder = _grounder(cfg, args.config)
    records = _records(args.annotations)
    root = Path(args.annotations).parent
    try:
        results = grounder.ground_many(records, root=root)
    except (MediaError, IndexError, InvalidInputError) as exc:
        raise DataError(str(exc)) from exc
    preds = {rec.sample_id: res.prediction_modes() for rec, res in zip(records, results)}
    report = accuracy(preds, records)
    report.metadata["predictions"] = {
        sid: {m: list(p) for m, p in modes.items()} for sid, modes in sorted(preds.items())
    }
    report.metadata["config"] = cfg.render()
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    correct = sum(report.correct.values())
    print(f"accuracy {report.accuracy:.6f} ({correct}/{report.n})")
    for mode in ("verb", "obj", "act"):
        if mode in report.breakdown:
            print(f"  {mode}: {report.breakdown[mode]:.6f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.mode not in SWEEP_MODES:
        raise UsageError(f"--mode must be one of {', '.join(SWEEP_MODES)}")
    cfg = _config(args.config)
    values = parse_range(args.range)
    try:
        sweep_settings(args.mode, values, cfg.depth)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    grounder = _grounder(cfg, args.config)
    records = _records(args.annotations)
    try:
        rows = ablation_sweep(grounder, records, args.mode, values, root=Path(args.annotations).parent)
    except (MediaError, IndexError, InvalidInputError) as exc:
        raise DataError(str(exc)) from exc
    text = format_sweep_csv(rows)
    out = Path(args.out or cfg.output_dir)
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"sweep_{args.mode}.csv"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_make_fixture(args) -> int:
    from .adapters import TOY_DIMS

    dims = dict(TOY_DIMS)
    for key in ("layer_count", "embed_dim", "head_count", "native_frames"):
        value = getattr(args, key)
        if value is not None:
            dims[key] = value
    try:
        backbone = make_toy_backbone(args.seed, path=args.out, **dims)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from exc
    print(f"{args.out} sha256={backbone.checksum()}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="actground", description="Training-free spatial action grounding.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ground", help="ground one label in one clip")
    p.add_argument("--config")
    p.add_argument("--media", required=True, help="video file, frame directory or image")
    p.add_argument("--frame", type=int, default=0, help="labeled frame index")
    p.add_argument("--label", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("eval", help="pointing-game accuracy over an annotation file")
    p.add_argument("--config")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="layer removal or depth ablation")
    p.add_argument("--config")
    p.add_argument("--annotations", required=True)
    p.add_argument("--mode", required=True)
    p.add_argument("--range", required=True, help="e.g. 0..7 or 1,2,3")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("make-fixture", help="write a seeded toy backbone fixture")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layer-count", dest="layer_count", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--head-count", dest="head_count", type=int)
    p.add_argument("--native-frames", dest="native_frames", type=int)
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"actground: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"actground: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
