"""Self-self attention pathway run in parallel to a frozen ViT.

For every projection (query, key, value) the tokens are projected, L2
normalized per head and clustered by ``iterations`` rounds of self-self
attention. The resulting attention matrix is applied to the value tokens and
the three branches are averaged. Block MLPs are never applied on this path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BlockWeights, LayerTrace, softmax

NORM_EPS = 1e-8


@dataclass(frozen=True)
class SelfSelfConfig:
    """``temperature`` may be a scalar or one value per head; ``None`` means sqrt(head_dim)."""

    iterations: int = 1
    temperature: float | tuple[float, ...] | None = None
    heads: int = 1

    def __post_init__(self):
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ValueError(f"iterations must be a non-negative integer, got {self.iterations}")
        if self.heads < 1:
            raise ValueError(f"heads must be positive, got {self.heads}")
        if self.temperature is not None:
            tau = np.atleast_1d(np.asarray(self.temperature, dtype=np.float64))
            if np.any(tau <= 0) or not np.all(np.isfinite(tau)):
                raise ValueError("temperature must be positive")
            if tau.size not in (1, self.heads):
                raise ValueError(f"expected 1 or {self.heads} temperatures, got {tau.size}")

    def head_temperatures(self, head_dim: int) -> np.ndarray:
        if self.temperature is None:
            tau = np.full(self.heads, np.sqrt(head_dim))
        else:
            tau = np.broadcast_to(np.asarray(self.temperature, dtype=np.float64), (self.heads,))
        return tau.reshape(self.heads, 1, 1)


@dataclass(frozen=True)
class PathwayState:
    """Pathway outputs Z^l for layers L-K+1..L and their residual sum.

    ``base`` is X^(L-K); ``accumulated`` is base + sum of ``layer_outputs``.
    """

    base: np.ndarray
    layer_outputs: np.ndarray  # (K, S, d), ordered shallow to deep
    accumulated: np.ndarray
    first_layer: int  # 1-based index of the first pathway layer (L - K + 1)

    @property
    def depth(self) -> int:
        return self.layer_outputs.shape[0]


def l2_normalize(x: np.ndarray) -> np.ndarray:
    return x / (np.linalg.norm(x, axis=-1, keepdims=True) + NORM_EPS)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    s, width = x.shape
    if width % heads:
        raise ValueError(f"projection width {width} not divisible by {heads} heads")
    return x.reshape(s, heads, width // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, s, dh = x.shape
    return x.transpose(1, 0, 2).reshape(s, h * dh)


def _iterate_heads(projected: np.ndarray, cfg: SelfSelfConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return per-head P^(J) and the final self-self attention matrices."""
    p = l2_normalize(_split_heads(projected, cfg.heads))
    tau = cfg.head_temperatures(p.shape[-1])
    for _ in range(cfg.iterations):
        attn = softmax(p @ p.transpose(0, 2, 1) / tau)
        p = l2_normalize(attn @ p)
    return p, softmax(p @ p.transpose(0, 2, 1) / tau)


def _check_tokens(tokens, w_proj) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be a 2-d matrix, got shape {tokens.shape}")
    if not np.all(np.isfinite(tokens)):
        raise ValueError("tokens must be finite")
    if w_proj.shape[0] != tokens.shape[1]:
        raise ValueError(f"projection of shape {w_proj.shape} does not accept {tokens.shape[1]}-d tokens")
    return tokens


def self_self_iterate(tokens, w_proj, cfg: SelfSelfConfig, bias=None) -> np.ndarray:
    """P^(J) for one projection, heads concatenated back to (S, h * d_h)."""
    w_proj = np.asarray(w_proj, dtype=np.float64)
    tokens = _check_tokens(tokens, w_proj)
    projected = tokens @ w_proj
    if bias is not None:
        projected = projected + bias
    p, _ = _iterate_heads(projected, cfg)
    return _merge_heads(p)


def self_self_attention(tokens, w_proj, cfg: SelfSelfConfig, bias=None) -> np.ndarray:
    """Per-head attention matrices softmax(P^(J) P^(J)^T / tau), shape (h, S, S)."""
    w_proj = np.asarray(w_proj, dtype=np.float64)
    tokens = _check_tokens(tokens, w_proj)
    projected = tokens @ w_proj
    if bias is not None:
        projected = projected + bias
    return _iterate_heads(projected, cfg)[1]


def self_self_branches(
    tokens, w_q, w_k, w_v, cfg: SelfSelfConfig, b_q=None, b_k=None, b_v=None
) -> dict[str, np.ndarray]:
    """Query-query, key-key and value-value outputs before averaging and out-projection."""
    w_v = np.asarray(w_v, dtype=np.float64)
    tokens = _check_tokens(tokens, w_v)
    values = tokens @ w_v
    if b_v is not None:
        values = values + b_v
    v_heads = _split_heads(values, cfg.heads)
    out = {}
    for name, w, b in (("qq", w_q, b_q), ("kk", w_k, b_k), ("vv", w_v, b_v)):
        attn = self_self_attention(tokens, w, cfg, bias=b)
        out[name] = _merge_heads(attn @ v_heads)
    return out


def self_self_output(
    tokens,
    w_q,
    w_k,
    w_v,
    cfg: SelfSelfConfig,
    *,
    b_q=None,
    b_k=None,
    b_v=None,
    w_o=None,
    b_o=None,
) -> np.ndarray:
    """Mean of the three self-self branches, then the block's output projection if given."""
    br = self_self_branches(tokens, w_q, w_k, w_v, cfg, b_q=b_q, b_k=b_k, b_v=b_v)
    out = (br["qq"] + br["kk"] + br["vv"]) / 3.0
    if w_o is not None:
        out = out @ w_o
    if b_o is not None:
        out = out + b_o
    return out


def block_pathway(x: np.ndarray, blk: BlockWeights, cfg: SelfSelfConfig) -> np.ndarray:
    """Z for one block: ln_1, self-self attention, output projection. No MLP."""
    return self_self_output(
        blk.ln_1(x),
        blk.w_q,
        blk.w_k,
        blk.w_v,
        cfg,
        b_q=blk.b_q,
        b_k=blk.b_k,
        b_v=blk.b_v,
        w_o=blk.w_o,
        b_o=blk.b_o,
    )


def gem_accumulate(
    trace: LayerTrace, depth: int, cfg: SelfSelfConfig, pathway_input: str = "chained"
) -> PathwayState:
    """Run the pathway over the last ``depth`` blocks of ``trace``.

    With ``pathway_input="chained"`` each block after the first reads the
    accumulated pathway state; ``"original"`` feeds every block the backbone's
    own X^(l-1) instead.
    """
    L = trace.layer_count
    if int(depth) != depth or not 0 <= depth <= L:
        raise ValueError(f"pathway depth must lie in [0, {L}], got {depth}")
    if pathway_input not in ("chained", "original"):
        raise ValueError(f"pathway_input must be 'chained' or 'original', got {pathway_input!r}")
    if cfg.heads != trace.descriptor.head_count:
        raise ValueError(
            f"config has {cfg.heads} heads, backbone has {trace.descriptor.head_count}"
        )
    base = trace.layer_outputs[L - depth]
    state = base
    zs = []
    for layer in range(L - depth + 1, L + 1):
        x_in = state if pathway_input == "chained" else trace.layer_outputs[layer - 1]
        z = block_pathway(x_in, trace.blocks[layer - 1], cfg)
        zs.append(z)
        state = state + z
    shape = (0,) + base.shape
    return PathwayState(
        base=base,
        layer_outputs=np.stack(zs) if zs else np.zeros(shape),
        accumulated=state,
        first_layer=L - depth + 1,
    )
