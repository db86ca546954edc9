"""Frozen vision-language backbones exposed through per-layer traces.

The vision tower is a pre-LN ViT evaluated in numpy (float64). Any weights
that fit :class:`ViTWeights` can be traced, which covers the seeded toy
backbone used by the test-suite as well as adapters that convert real CLIP
checkpoints into the same layout.

Toy fixture file layout (all integers and floats little-endian)::

    bytes 0..7    magic b"ACTGTOY1"
    11 x uint32   format version, L, d, h, d_h, rows, cols, patch_size,
                  native_frames, joint_dim, mlp_dim
    uint64        seed
    float32 ...   arrays in the order of ``_weight_layout`` below, every
                  matrix row-major; per-layer blocks in layer order

Sequence layout: one CLS token at index 0, then patch tokens frame-major and
row-major inside a frame.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

FIXTURE_MAGIC = b"ACTGTOY1"
FIXTURE_VERSION = 1
LN_EPS = 1e-5
_HEADER = struct.Struct("<8s11IQ")


class InvalidInputError(ValueError):
    """Input data that does not fit the backbone contract."""


class CorruptFixtureError(ValueError):
    """A fixture file that cannot be decoded into a full set of weights."""


@dataclass(frozen=True)
class BackboneDescriptor:
    layer_count: int
    embed_dim: int
    head_count: int
    head_dim: int
    patch_grid: tuple[int, int]
    patch_size: int = 4
    native_frames: int = 1
    joint_dim: int | None = None
    mlp_dim: int | None = None
    weight_source: str | None = None

    def __post_init__(self):
        if self.joint_dim is None:
            object.__setattr__(self, "joint_dim", self.embed_dim)
        if self.mlp_dim is None:
            object.__setattr__(self, "mlp_dim", 4 * self.embed_dim)
        object.__setattr__(self, "patch_grid", tuple(int(v) for v in self.patch_grid))
        positive = {
            "layer_count": self.layer_count,
            "embed_dim": self.embed_dim,
            "head_count": self.head_count,
            "head_dim": self.head_dim,
            "patch_size": self.patch_size,
            "joint_dim": self.joint_dim,
            "mlp_dim": self.mlp_dim,
            "patch_grid rows": self.patch_grid[0],
            "patch_grid cols": self.patch_grid[1],
        }
        for name, value in positive.items():
            if int(value) < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {value}")
        if self.embed_dim != self.head_count * self.head_dim:
            raise InvalidInputError(
                f"embed_dim ({self.embed_dim}) must equal head_count * head_dim "
                f"({self.head_count} * {self.head_dim})"
            )
        if self.native_frames not in (1, 8):
            raise InvalidInputError(f"native_frames must be 1 or 8, got {self.native_frames}")

    @property
    def num_patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def input_size(self) -> tuple[int, int]:
        """Frame (height, width) in pixels expected by the patch embedding."""
        return self.patch_grid[0] * self.patch_size, self.patch_grid[1] * self.patch_size

    @property
    def is_video(self) -> bool:
        return self.native_frames > 1


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return layer_norm(x, self.gamma, self.beta)


@dataclass(frozen=True)
class BlockWeights:
    """One pre-LN transformer block. Projections act on row vectors (x @ W)."""

    ln_1: LayerNormParams
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln_2: LayerNormParams
    w_fc1: np.ndarray
    b_fc1: np.ndarray
    w_fc2: np.ndarray
    b_fc2: np.ndarray


@dataclass(frozen=True)
class ViTWeights:
    patch_embed: np.ndarray  # (3 * p * p, d), patch pixels flattened (row, col, channel)
    class_embedding: np.ndarray  # (d,)
    pos_embedding: np.ndarray  # (N + 1, d)
    ln_pre: LayerNormParams
    blocks: tuple[BlockWeights, ...]
    ln_post: LayerNormParams
    proj: np.ndarray  # (d, joint_dim)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gamma + beta


def quick_gelu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-1.702 * x))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class TextEmbedding:
    vector: np.ndarray
    source_prompt: str

    def __post_init__(self):
        vec = _frozen(self.vector)
        if vec.ndim != 1 or not np.all(np.isfinite(vec)):
            raise InvalidInputError("text embedding must be a finite 1-d vector")
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True)
class FrameBatch:
    """Ordered frames (uint8 H x W x 3) plus the index of the labeled frame."""

    frames: tuple[np.ndarray, ...]
    target_index: int
    mode: str = "video"
    source_indices: tuple[int, ...] | None = None

    def __post_init__(self):
        frames = tuple(np.asarray(f) for f in self.frames)
        if not frames:
            raise InvalidInputError("a frame batch needs at least one frame")
        shape = frames[0].shape
        for f in frames:
            if f.ndim != 3 or f.shape[2] != 3:
                raise InvalidInputError(f"frames must be H x W x 3, got shape {f.shape}")
            if f.shape != shape:
                raise InvalidInputError("all frames in a batch must share dimensions")
            if f.dtype != np.uint8:
                raise InvalidInputError(f"frames must be 8-bit, got dtype {f.dtype}")
        if not 0 <= self.target_index < len(frames):
            raise InvalidInputError(
                f"target_index {self.target_index} outside batch of {len(frames)} frames"
            )
        if self.mode not in ("video", "repeated_image"):
            raise InvalidInputError(f"unknown frame mode {self.mode!r}")
        object.__setattr__(self, "frames", frames)

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.frames[0].shape[:2]

    @property
    def target_frame(self) -> np.ndarray:
        return self.frames[self.target_index]


@dataclass(frozen=True)
class LayerTrace:
    """Activations captured during one forward pass.

    ``layer_outputs[l]`` is X^l (l = 0 is the post-embedding input),
    ``pre_residual[l - 1]`` is the block's total residual Y^l so that
    X^l = X^(l-1) + Y^l. ``cls_residuals`` holds the CLS row of every Y^l,
    except that the first entry also carries the embedded CLS token X^0[0];
    with that convention the entries sum exactly to the final CLS token.
    """

    layer_outputs: np.ndarray  # (L + 1, S, d)
    pre_residual: np.ndarray  # (L, S, d)
    cls_residuals: np.ndarray  # (L, d)
    blocks: tuple[BlockWeights, ...]
    ln_post: LayerNormParams
    proj: np.ndarray
    descriptor: BackboneDescriptor
    frame_count: int

    @property
    def layer_count(self) -> int:
        return self.descriptor.layer_count

    @property
    def cls_token(self) -> np.ndarray:
        return self.layer_outputs[-1, 0]

    def to_joint(self, tokens: np.ndarray) -> np.ndarray:
        """Final layer norm followed by the visual projection."""
        return self.ln_post(np.asarray(tokens, dtype=np.float64)) @ self.proj

    def cls_embedding(self) -> np.ndarray:
        """Visual joint-space embedding of the whole input (projected CLS)."""
        return self.to_joint(self.cls_token)


class Backbone(Protocol):
    descriptor: BackboneDescriptor

    def forward_with_trace(self, batch: FrameBatch) -> LayerTrace: ...

    def encode_text(self, prompt: str) -> TextEmbedding: ...


def _check_dims(desc: BackboneDescriptor, weights: ViTWeights) -> None:
    d, p = desc.embed_dim, desc.patch_size
    expected = {
        "patch_embed": ((3 * p * p, d), weights.patch_embed.shape),
        "class_embedding": ((d,), weights.class_embedding.shape),
        "pos_embedding": ((desc.num_patches + 1, d), weights.pos_embedding.shape),
        "proj": ((d, desc.joint_dim), weights.proj.shape),
    }
    for name, (want, got) in expected.items():
        if tuple(want) != tuple(got):
            raise InvalidInputError(f"{name} has shape {got}, expected {want}")
    if len(weights.blocks) != desc.layer_count:
        raise InvalidInputError(
            f"{len(weights.blocks)} blocks given for layer_count {desc.layer_count}"
        )
    for i, blk in enumerate(weights.blocks):
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(blk, name).shape != (d, d):
                raise InvalidInputError(f"block {i} {name} must be {d} x {d}")
        if blk.w_fc1.shape != (d, desc.mlp_dim) or blk.w_fc2.shape != (desc.mlp_dim, d):
            raise InvalidInputError(f"block {i} MLP weights do not match mlp_dim {desc.mlp_dim}")


def multi_head_attention(x: np.ndarray, blk: BlockWeights, heads: int) -> np.ndarray:
    """Standard query-key attention of one block (input already normalized)."""
    s, d = x.shape
    dh = d // heads

    def split(a):
        return a.reshape(s, heads, dh).transpose(1, 0, 2)

    q = split(x @ blk.w_q + blk.b_q)
    k = split(x @ blk.w_k + blk.b_k)
    v = split(x @ blk.w_v + blk.b_v)
    attn = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dh))
    out = (attn @ v).transpose(1, 0, 2).reshape(s, d)
    return out @ blk.w_o + blk.b_o


class ViTBackbone:
    """Numpy pre-LN ViT with per-layer tracing.

    Subclasses provide :meth:`encode_text`.
    """

    def __init__(self, descriptor: BackboneDescriptor, weights: ViTWeights):
        _check_dims(descriptor, weights)
        self.descriptor = descriptor
        self.weights = weights

    def embed_frames(self, batch: FrameBatch) -> np.ndarray:
        """Patch-embed every frame separately and assemble X^0."""
        desc = self.descriptor
        if desc.is_video and batch.frame_count != desc.native_frames:
            raise InvalidInputError(
                f"video backbone expects {desc.native_frames} frames, got {batch.frame_count}"
            )
        if tuple(batch.frame_size) != desc.input_size:
            raise InvalidInputError(
                f"frame size {tuple(batch.frame_size)} does not match the patch grid "
                f"{desc.patch_grid} x {desc.patch_size}px = {desc.input_size}"
            )
        w = self.weights
        rows, cols = desc.patch_grid
        p = desc.patch_size
        cls = (w.class_embedding + w.pos_embedding[0])[None, :]
        blocks = [cls]
        for frame in batch.frames:
            pixels = frame.astype(np.float64) / 255.0 - 0.5
            patches = (
                pixels.reshape(rows, p, cols, p, 3)
                .transpose(0, 2, 1, 3, 4)
                .reshape(rows * cols, p * p * 3)
            )
            blocks.append(patches @ w.patch_embed + w.pos_embedding[1:])
        return w.ln_pre(np.concatenate(blocks, axis=0))

    def forward_with_trace(self, batch: FrameBatch) -> LayerTrace:
        desc = self.descriptor
        x = self.embed_frames(batch)
        outputs = [x]
        residuals = []
        for blk in self.weights.blocks:
            attn = multi_head_attention(blk.ln_1(x), blk, desc.head_count)
            h = x + attn
            mlp = quick_gelu(blk.ln_2(h) @ blk.w_fc1 + blk.b_fc1) @ blk.w_fc2 + blk.b_fc2
            y = attn + mlp
            x = x + y
            residuals.append(y)
            outputs.append(x)
        outputs = np.stack(outputs)
        residuals = np.stack(residuals)
        cls_res = residuals[:, 0, :].copy()
        cls_res[0] += outputs[0, 0]
        return LayerTrace(
            layer_outputs=_frozen(outputs),
            pre_residual=_frozen(residuals),
            cls_residuals=_frozen(cls_res),
            blocks=self.weights.blocks,
            ln_post=self.weights.ln_post,
            proj=self.weights.proj,
            descriptor=desc,
            frame_count=batch.frame_count,
        )

    def encode_text(self, prompt: str) -> TextEmbedding:  # pragma: no cover - abstract
        raise NotImplementedError


# ---------------------------------------------------------------------------
# toy backbone and its portable fixture file


def _weight_layout(desc: BackboneDescriptor) -> list[tuple[str, tuple[int, ...]]]:
    d, p, m, j = desc.embed_dim, desc.patch_size, desc.mlp_dim, desc.joint_dim
    layout = [
        ("patch_embed", (3 * p * p, d)),
        ("class_embedding", (d,)),
        ("pos_embedding", (desc.num_patches + 1, d)),
        ("ln_pre.gamma", (d,)),
        ("ln_pre.beta", (d,)),
    ]
    for i in range(desc.layer_count):
        layout += [
            (f"blocks.{i}.ln_1.gamma", (d,)),
            (f"blocks.{i}.ln_1.beta", (d,)),
            (f"blocks.{i}.w_q", (d, d)),
            (f"blocks.{i}.b_q", (d,)),
            (f"blocks.{i}.w_k", (d, d)),
            (f"blocks.{i}.b_k", (d,)),
            (f"blocks.{i}.w_v", (d, d)),
            (f"blocks.{i}.b_v", (d,)),
            (f"blocks.{i}.w_o", (d, d)),
            (f"blocks.{i}.b_o", (d,)),
            (f"blocks.{i}.ln_2.gamma", (d,)),
            (f"blocks.{i}.ln_2.beta", (d,)),
            (f"blocks.{i}.w_fc1", (d, m)),
            (f"blocks.{i}.b_fc1", (m,)),
            (f"blocks.{i}.w_fc2", (m, d)),
            (f"blocks.{i}.b_fc2", (d,)),
        ]
    layout += [
        ("ln_post.gamma", (d,)),
        ("ln_post.beta", (d,)),
        ("proj", (d, j)),
        ("text_proj", (256, j)),
    ]
    return layout


def _generate_arrays(seed: int, desc: BackboneDescriptor) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d = desc.embed_dim
    arrays = {}
    for name, shape in _weight_layout(desc):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            a = 1.0 + 0.1 * rng.standard_normal(shape)
        elif leaf == "beta" or leaf.startswith("b_"):
            a = 0.02 * rng.standard_normal(shape)
        elif name == "text_proj":
            a = rng.standard_normal(shape) / 4.0
        else:
            a = rng.standard_normal(shape) / np.sqrt(shape[0] if len(shape) > 1 else d)
        arrays[name] = a.astype("<f4")
    return arrays


def _assemble(desc: BackboneDescriptor, arrays: dict[str, np.ndarray]) -> ViTWeights:
    def ln(prefix):
        return LayerNormParams(_frozen(arrays[f"{prefix}.gamma"]), _frozen(arrays[f"{prefix}.beta"]))

    blocks = []
    for i in range(desc.layer_count):
        b = f"blocks.{i}."
        blocks.append(
            BlockWeights(
                ln_1=ln(b + "ln_1"),
                ln_2=ln(b + "ln_2"),
                **{
                    k: _frozen(arrays[b + k])
                    for k in (
                        "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
                        "w_fc1", "b_fc1", "w_fc2", "b_fc2",
                    )
                },
            )
        )
    return ViTWeights(
        patch_embed=_frozen(arrays["patch_embed"]),
        class_embedding=_frozen(arrays["class_embedding"]),
        pos_embedding=_frozen(arrays["pos_embedding"]),
        ln_pre=ln("ln_pre"),
        blocks=tuple(blocks),
        ln_post=ln("ln_post"),
        proj=_frozen(arrays["proj"]),
    )


def text_stub_features(prompt: str) -> np.ndarray:
    """Byte-level bag of characters (UTF-8 byte counts)."""
    return np.bincount(np.frombuffer(prompt.encode("utf-8"), dtype=np.uint8), minlength=256).astype(
        np.float64
    )


class ToyBackbone(ViTBackbone):
    """Seeded toy ViT with a bag-of-bytes text stub."""

    def __init__(self, descriptor: BackboneDescriptor, arrays: dict[str, np.ndarray], seed: int = 0):
        super().__init__(descriptor, _assemble(descriptor, arrays))
        self.seed = int(seed)
        self._arrays = {k: np.asarray(v, dtype="<f4") for k, v in arrays.items()}
        self.text_proj = _frozen(self._arrays["text_proj"])

    def encode_text(self, prompt: str) -> TextEmbedding:
        if not isinstance(prompt, str) or not prompt:
            raise InvalidInputError("prompt must be a non-empty string")
        return TextEmbedding(text_stub_features(prompt) @ self.text_proj, prompt)

    def to_bytes(self) -> bytes:
        desc = self.descriptor
        header = _HEADER.pack(
            FIXTURE_MAGIC,
            FIXTURE_VERSION,
            desc.layer_count,
            desc.embed_dim,
            desc.head_count,
            desc.head_dim,
            desc.patch_grid[0],
            desc.patch_grid[1],
            desc.patch_size,
            desc.native_frames,
            desc.joint_dim,
            desc.mlp_dim,
            self.seed,
        )
        body = b"".join(self._arrays[name].tobytes(order="C") for name, _ in _weight_layout(desc))
        return header + body

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def with_zero_blocks(self) -> "ToyBackbone":
        """Copy with every block projection/MLP weight and bias zeroed and identity norms."""
        arrays = dict(self._arrays)
        for name in arrays:
            if not name.startswith("blocks."):
                continue
            leaf = name.rsplit(".", 1)[-1]
            arrays[name] = (
                np.ones_like(arrays[name]) if leaf == "gamma" else np.zeros_like(arrays[name])
            )
        return ToyBackbone(self.descriptor, arrays, self.seed)


def make_toy_backbone(
    seed: int,
    layer_count: int = 4,
    embed_dim: int = 8,
    head_count: int = 2,
    patch_grid: Sequence[int] = (2, 2),
    patch_size: int = 4,
    native_frames: int = 1,
    joint_dim: int | None = None,
    mlp_dim: int | None = None,
    path=None,
) -> ToyBackbone:
    """Materialize a toy backbone from ``seed``; optionally write its fixture file."""
    if head_count < 1 or embed_dim % head_count:
        raise InvalidInputError(f"embed_dim {embed_dim} is not divisible by head_count {head_count}")
    if not 0 <= int(seed) < 2**64:
        raise InvalidInputError("seed must fit in an unsigned 64-bit integer")
    desc = BackboneDescriptor(
        layer_count=layer_count,
        embed_dim=embed_dim,
        head_count=head_count,
        head_dim=embed_dim // head_count,
        patch_grid=tuple(patch_grid),
        patch_size=patch_size,
        native_frames=native_frames,
        joint_dim=joint_dim,
        mlp_dim=mlp_dim,
        weight_source=str(path) if path is not None else f"seed:{seed}",
    )
    backbone = ToyBackbone(desc, _generate_arrays(int(seed), desc), seed=int(seed))
    if path is not None:
        backbone.save(path)
    return backbone


def load_toy_backbone(path) -> ToyBackbone:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptFixtureError(f"{path}: file too short for a fixture header")
    magic, version, L, d, h, dh, rows, cols, p, frames, j, m, seed = _HEADER.unpack_from(raw)
    if magic != FIXTURE_MAGIC:
        raise CorruptFixtureError(f"{path}: bad magic {magic!r}")
    if version != FIXTURE_VERSION:
        raise CorruptFixtureError(f"{path}: unsupported fixture version {version}")
    try:
        desc = BackboneDescriptor(L, d, h, dh, (rows, cols), p, frames, j, m, weight_source=str(path))
    except InvalidInputError as exc:
        raise CorruptFixtureError(f"{path}: inconsistent header ({exc})") from exc
    arrays = {}
    offset = _HEADER.size
    for name, shape in _weight_layout(desc):
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(raw):
            raise CorruptFixtureError(f"{path}: missing weights starting at {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset = end
    if offset != len(raw):
        raise CorruptFixtureError(f"{path}: {len(raw) - offset} trailing bytes after weights")
    return ToyBackbone(desc, arrays, seed=seed)


def forward_with_trace(batch: FrameBatch, backbone: Backbone) -> LayerTrace:
    return backbone.forward_with_trace(batch)


def encode_text(prompt: str, backbone: Backbone) -> TextEmbedding:
    return backbone.encode_text(prompt)


__all__ = [
    "Backbone",
    "BackboneDescriptor",
    "BlockWeights",
    "CorruptFixtureError",
    "FrameBatch",
    "InvalidInputError",
    "LayerNormParams",
    "LayerTrace",
    "TextEmbedding",
    "ToyBackbone",
    "ViTBackbone",
    "ViTWeights",
    "encode_text",
    "forward_with_trace",
    "load_toy_backbone",
    "make_toy_backbone",
]
