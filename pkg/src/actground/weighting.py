"""Static, dynamic and combined layer weights for the self-self pathway.

A weight vector always has K + 1 entries: entry 0 scales X^(L-K), entry i
scales Z^(L-K+i). Weighted sums are accumulated in that order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import LayerTrace
from .gem import PathwayState

MODES = ("none", "static", "dynamic", "combined")
DEFAULT_STATIC_WEIGHTS = (0.3, 0.4, 0.5, 0.6, 0.7, 0.9, 0.9, 0.9)


@dataclass(frozen=True)
class WeightConfig:
    depth: int = 7
    dynamic_depth: int = 3
    tau_d: float = 20.0
    static_weights: tuple[float, ...] = DEFAULT_STATIC_WEIGHTS
    mode: str = "combined"

    def __post_init__(self):
        object.__setattr__(self, "static_weights", tuple(float(w) for w in self.static_weights))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.depth < 0:
            raise ValueError(f"depth must be non-negative, got {self.depth}")
        if not 0 <= self.dynamic_depth <= self.depth:
            raise ValueError(
                f"dynamic_depth must lie in [0, depth={self.depth}], got {self.dynamic_depth}"
            )
        if not self.tau_d > 0:
            raise ValueError(f"tau_d must be positive, got {self.tau_d}")
        if len(self.static_weights) != self.depth + 1:
            raise ValueError(
                f"static_weights needs depth + 1 = {self.depth + 1} entries, "
                f"got {len(self.static_weights)}"
            )

    @property
    def uses_text(self) -> bool:
        return self.mode in ("dynamic", "combined") and self.dynamic_depth > 0


@dataclass(frozen=True)
class DynamicWeights:
    similarities: np.ndarray  # s^(L-D+1) .. s^L
    weights: np.ndarray
    log_weights: np.ndarray | None = None  # resolves weights that round to 0 or 1

    def as_dict(self, first_layer: int) -> dict[str, float]:
        return {str(first_layer + i): float(w) for i, w in enumerate(self.weights)}


def weighted_output(pathway: PathwayState, weights) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (pathway.depth + 1,):
        raise ValueError(
            f"expected {pathway.depth + 1} layer weights for depth {pathway.depth}, "
            f"got {weights.shape[0] if weights.ndim else 'a scalar'}"
        )
    out = weights[0] * pathway.base
    for w, z in zip(weights[1:], pathway.layer_outputs):
        out = out + w * z
    return out


def static_weighted_output(pathway: PathwayState, static_weights) -> np.ndarray:
    return weighted_output(pathway, static_weights)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def residual_removed_similarities(x_cls, cls_residuals, e_eos, dynamic_depth: int, project=None) -> np.ndarray:
    """cos(x_cls - Y_cls^l, e_eos) for the last ``dynamic_depth`` residuals.

    ``project`` maps the residual-removed CLS vector into the text space
    before the cosine. A zero vector has similarity 0.
    """
    x_cls = np.asarray(x_cls, dtype=np.float64)
    cls_residuals = np.asarray(cls_residuals, dtype=np.float64)
    e_eos = np.asarray(e_eos, dtype=np.float64)
    if dynamic_depth < 0 or dynamic_depth > len(cls_residuals):
        raise ValueError(
            f"dynamic_depth must lie in [0, {len(cls_residuals)}], got {dynamic_depth}"
        )
    sims = []
    for y in cls_residuals[len(cls_residuals) - dynamic_depth:]:
        v = x_cls - y
        if project is not None:
            if not np.any(v):
                sims.append(0.0)
                continue
            v = project(v)
        sims.append(_cosine(v, e_eos))
    return np.array(sims)


def layer_similarities(trace: LayerTrace, e_eos, dynamic_depth: int) -> np.ndarray:
    """Layer-removal similarities taken from the backbone's own CLS stream."""
    return residual_removed_similarities(
        trace.cls_token, trace.cls_residuals, e_eos, dynamic_depth, project=trace.to_joint
    )


def dynamic_weights(similarities, tau_d: float) -> DynamicWeights:
    s = np.asarray(similarities, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("similarities must be finite")
    if s.size == 0:
        return DynamicWeights(s, s.copy(), s.copy())
    z = -s * float(tau_d)
    top = int(np.argmax(z))
    e = np.exp(z - z[top])
    # log of the normalizer without the leading 1, so log1p keeps tiny tails
    tail = float(np.delete(e, top).sum()) if s.size > 1 else 0.0
    log_w = (z - z[top]) - np.log1p(tail)
    return DynamicWeights(s, e / e.sum(), log_w)


def layer_weight_vector(cfg: WeightConfig, dynamic: DynamicWeights | None = None) -> np.ndarray:
    """Per-entry weights for ``cfg.mode`` (see module docstring for indexing)."""
    n = cfg.depth + 1
    D = cfg.dynamic_depth
    if cfg.mode == "none":
        return np.ones(n)
    if cfg.mode == "static":
        return np.array(cfg.static_weights)
    if D > 0 and (dynamic is None or dynamic.weights.shape != (D,)):
        raise ValueError(f"mode {cfg.mode!r} needs {D} dynamic weights")
    if cfg.mode == "dynamic":
        w = np.ones(n)
        if D:
            w[n - D:] = dynamic.weights
        return w
    w = np.array(cfg.static_weights)
    if D:
        w[n - D:] = w[n - D:] - 1.0 / D + dynamic.weights
    return w


def combined_output(
    trace: LayerTrace, pathway: PathwayState, cfg: WeightConfig, e_eos=None
) -> tuple[np.ndarray, DynamicWeights | None]:
    """Weighted pathway output for ``cfg.mode`` plus the dynamic weights used, if any."""
    if pathway.depth != cfg.depth:
        raise ValueError(f"pathway depth {pathway.depth} differs from configured depth {cfg.depth}")
    dyn = None
    if cfg.uses_text:
        if e_eos is None:
            raise ValueError(f"mode {cfg.mode!r} requires a text embedding")
        dyn = dynamic_weights(layer_similarities(trace, e_eos, cfg.dynamic_depth), cfg.tau_d)
    return weighted_output(pathway, layer_weight_vector(cfg, dyn)), dyn
