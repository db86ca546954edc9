"""Flat ``key = value`` run configuration.

Unknown keys are rejected, missing keys take the defaults below (which
reproduce the published setting). Lists are comma separated. ``#`` starts a
comment line.

Keys
----
backbone        fixture file path, ``seed:<n>`` (built-in toy) or ``adapter:<name>``
depth           number of self-self attention layers K
iterations      self-self iterations J
temperature     self-self temperature, ``auto`` = sqrt(head_dim)
static_weights  K + 1 static layer weights, starting at the pathway input
dynamic_depth   number of dynamically weighted final layers D
tau_d           dynamic-weight temperature
weighting       none | static | dynamic | combined
fusion_weights  verb, object, action weights for center averaging
merge           center_average | heatmap_average | heatmap_multiply
merge_ratio     verb:object:action ratio for heatmap merging
num_frames      frames per clip T
frame_mode      video | repeated_image
label_style     auto | underscore | natural
pathway_input   chained | original
workers         worker threads for batch commands
output_dir      default output directory
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .prompts import MERGE_STRATEGIES, DEFAULT_FUSION_WEIGHTS, check_fusion_weights
from .weighting import MODES, DEFAULT_STATIC_WEIGHTS, WeightConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config field {key!r}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    backbone: str = "seed:42"
    depth: int = 7
    iterations: int = 1
    temperature: float | None = None
    static_weights: tuple[float, ...] = DEFAULT_STATIC_WEIGHTS
    dynamic_depth: int = 3
    tau_d: float = 20.0
    weighting: str = "combined"
    fusion_weights: tuple[float, ...] = DEFAULT_FUSION_WEIGHTS
    merge: str = "center_average"
    merge_ratio: tuple[float, ...] = (1.0, 1.0, 3.0)
    num_frames: int = 8
    frame_mode: str = "video"
    label_style: str = "auto"
    pathway_input: str = "chained"
    workers: int = 1
    output_dir: str = "out"

    def __post_init__(self):
        _validate(self)

    def weight_config(self) -> WeightConfig:
        return WeightConfig(
            depth=self.depth,
            dynamic_depth=self.dynamic_depth,
            tau_d=self.tau_d,
            static_weights=self.static_weights,
            mode=self.weighting,
        )

    def estimator_params(self) -> dict:
        return {
            "depth": self.depth,
            "iterations": self.iterations,
            "temperature": self.temperature,
            "static_weights": self.static_weights,
            "dynamic_depth": self.dynamic_depth,
            "tau_d": self.tau_d,
            "weighting": self.weighting,
            "fusion_weights": self.fusion_weights,
            "merge": self.merge,
            "merge_ratio": self.merge_ratio,
            "num_frames": self.num_frames,
            "frame_mode": self.frame_mode,
            "label_style": self.label_style,
            "pathway_input": self.pathway_input,
            "n_jobs": self.workers,
        }

    def render(self) -> str:
        lines = ["# actground run configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {_render_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _render_value(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, tuple):
        return ", ".join(_render_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_CHOICES = {
    "weighting": MODES,
    "merge": MERGE_STRATEGIES,
    "frame_mode": ("video", "repeated_image"),
    "label_style": ("auto", "underscore", "natural"),
    "pathway_input": ("chained", "original"),
}


def _validate(cfg: RunConfig) -> None:
    for key, choices in _CHOICES.items():
        if getattr(cfg, key) not in choices:
            raise ConfigError(key, f"must be one of {', '.join(choices)}")
    for key in ("depth", "iterations", "dynamic_depth"):
        if getattr(cfg, key) < 0:
            raise ConfigError(key, "must be non-negative")
    for key in ("num_frames", "workers"):
        if getattr(cfg, key) < 1:
            raise ConfigError(key, "must be positive")
    if cfg.temperature is not None and not cfg.temperature > 0:
        raise ConfigError("temperature", "must be positive or auto")
    if not cfg.backbone:
        raise ConfigError("backbone", "must not be empty")
    try:
        cfg.weight_config()
    except ValueError as exc:
        msg = str(exc)
        key = next(
            (k for k in ("static_weights", "dynamic_depth", "tau_d") if k in msg or k.replace("_", " ") in msg),
            "static_weights",
        )
        raise ConfigError(key, msg) from exc
    try:
        check_fusion_weights(cfg.fusion_weights)
    except ValueError as exc:
        raise ConfigError("fusion_weights", str(exc)) from exc
    if len(cfg.merge_ratio) != 3 or any(not r > 0 for r in cfg.merge_ratio):
        raise ConfigError("merge_ratio", "needs three positive entries")


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, text: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            v = float(text)
            if not math.isfinite(v):
                raise ValueError("not finite")
            return v
        if kind == "float | None":
            return None if text == "auto" else float(text)
        if kind.startswith("tuple"):
            return tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {text!r} ({exc})") from exc
    return text


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(key or f"line {lineno}", "expected 'key = value'")
        if key not in _TYPES:
            raise ConfigError(key, "unknown key")
        if key in values:
            raise ConfigError(key, "given more than once")
        values[key] = _parse_value(key, value.strip())
    return RunConfig(**values)


def load_config(path=None) -> RunConfig:
    if path is None:
        return parse_config(default_config_text())
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    return parse_config(text)


def default_config_text() -> str:
    return resources.files("actground").joinpath("default.cfg").read_text(encoding="utf-8")
