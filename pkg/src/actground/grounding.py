"""Frame sampling, patch/text similarity, heatmaps and center points."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import FrameBatch, InvalidInputError, LayerTrace

HEATMAP_MAGIC = b"ACTHMAP1"
_HEATMAP_HEADER = struct.Struct("<8sII")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


class MediaError(OSError):
    """Media that cannot be opened or decoded."""


@dataclass(frozen=True)
class Heatmap:
    grid: np.ndarray  # (H, W), min-max normalized

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.grid.shape


@dataclass(frozen=True)
class CenterPrediction:
    x: int
    y: int
    source: str = ""

    @property
    def point(self) -> tuple[int, int]:
        return self.x, self.y


# ---------------------------------------------------------------------------
# media


def _read_image(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise MediaError(f"cannot decode image {path}: {exc}") from exc


class MediaSource:
    """Random access to decoded RGB frames of an image, a frame directory or a video."""

    def __init__(self, frames=None, paths=None, video=None):
        self._frames = frames
        self._paths = paths
        self._video = video
        if video is not None:
            try:
                import cv2
            except ImportError as exc:
                raise MediaError("video input needs OpenCV; install actground[video]") from exc
            cap = cv2.VideoCapture(str(video))
            if not cap.isOpened():
                raise MediaError(f"cannot open video {video}")
            self._length = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
            cap.release()
            if self._length <= 0:
                raise MediaError(f"video {video} has no frames")

    @classmethod
    def open(cls, path) -> "MediaSource":
        path = Path(path)
        if not path.exists():
            raise MediaError(f"media not found: {path}")
        if path.is_dir():
            paths = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
            if not paths:
                raise MediaError(f"no image frames in directory {path}")
            return cls(paths=paths)
        if path.suffix.lower() in IMAGE_SUFFIXES:
            return cls(frames=[_read_image(path)])
        return cls(video=path)

    @classmethod
    def from_frames(cls, frames) -> "MediaSource":
        return cls(frames=[np.asarray(f, dtype=np.uint8) for f in frames])

    def __len__(self) -> int:
        if self._frames is not None:
            return len(self._frames)
        if self._paths is not None:
            return len(self._paths)
        return self._length

    def frame(self, index: int) -> np.ndarray:
        if not 0 <= index < len(self):
            raise IndexError(f"frame {index} outside media of {len(self)} frames")
        if self._frames is not None:
            return self._frames[index]
        if self._paths is not None:
            return _read_image(self._paths[index])
        import cv2

        cap = cv2.VideoCapture(str(self._video))
        try:
            cap.set(cv2.CAP_PROP_POS_FRAMES, index)
            ok, bgr = cap.read()
        finally:
            cap.release()
        if not ok:
            raise MediaError(f"cannot decode frame {index} of {self._video}")
        return np.ascontiguousarray(bgr[:, :, ::-1])


def sample_indices(labeled_index: int, frame_count: int, num_frames: int = 8) -> tuple[list[int], int]:
    """Indices around the labeled frame (T // 2 before, the rest after), edge-clamped."""
    if num_frames < 1:
        raise InvalidInputError(f"num_frames must be positive, got {num_frames}")
    if not 0 <= labeled_index < frame_count:
        raise InvalidInputError(
            f"labeled frame {labeled_index} outside media of {frame_count} frames"
        )
    before = num_frames // 2
    idx = [
        min(max(labeled_index + off, 0), frame_count - 1)
        for off in range(-before, num_frames - before)
    ]
    return idx, before


def sample_frames(media, labeled_index: int, num_frames: int = 8, mode: str = "video") -> FrameBatch:
    if not isinstance(media, MediaSource):
        media = MediaSource.open(media) if isinstance(media, (str, Path)) else MediaSource.from_frames(media)
    if mode == "video":
        idx, target = sample_indices(labeled_index, len(media), num_frames)
    elif mode == "repeated_image":
        if not 0 <= labeled_index < len(media):
            raise InvalidInputError(
                f"labeled frame {labeled_index} outside media of {len(media)} frames"
            )
        idx, target = [labeled_index] * num_frames, num_frames // 2
    else:
        raise InvalidInputError(f"unknown frame mode {mode!r}")
    cache = {}
    frames = []
    for i in idx:
        if i not in cache:
            cache[i] = media.frame(i)
        frames.append(cache[i])
    return FrameBatch(tuple(frames), target, mode, tuple(idx))


def resize_frame(frame: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize an RGB uint8 frame to (height, width) with bilinear filtering."""
    if frame.shape[:2] == tuple(size):
        return frame
    from PIL import Image

    h, w = size
    return np.asarray(Image.fromarray(frame).resize((w, h), Image.BILINEAR), dtype=np.uint8)


# ---------------------------------------------------------------------------
# similarity and heatmaps


def cosine_rows(tokens: np.ndarray, e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if tokens.shape[-1] != e.shape[0]:
        raise InvalidInputError(
            f"token width {tokens.shape[-1]} does not match text embedding width {e.shape[0]}"
        )
    num = tokens @ e
    den = np.linalg.norm(tokens, axis=-1) * np.linalg.norm(e)
    out = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return np.clip(out, -1.0, 1.0)


def patch_text_similarity(output_tokens, e_eos, trace: LayerTrace) -> np.ndarray:
    """Cosine between every projected patch token (CLS dropped) and the text embedding."""
    output_tokens = np.asarray(output_tokens, dtype=np.float64)
    expected = trace.frame_count * trace.descriptor.num_patches + 1
    if output_tokens.shape != (expected, trace.descriptor.embed_dim):
        raise InvalidInputError(
            f"expected ({expected}, {trace.descriptor.embed_dim}) tokens, got {output_tokens.shape}"
        )
    return cosine_rows(trace.to_joint(output_tokens[1:]), e_eos)


def _axis_stencil(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(grid, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centered bilinear interpolation with edge clamping."""
    grid = np.asarray(grid, dtype=np.float64)
    r0, r1, fr = _axis_stencil(grid.shape[0], size[0])
    c0, c1, fc = _axis_stencil(grid.shape[1], size[1])
    top = grid[r0][:, c0] * (1 - fc) + grid[r0][:, c1] * fc
    bottom = grid[r1][:, c0] * (1 - fc) + grid[r1][:, c1] * fc
    return top * (1 - fr[:, None]) + bottom * fr[:, None]


def min_max_normalize(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = grid.min(), grid.max()
    if hi == lo:
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def heatmap_for_target_frame(
    similarities, target_index: int, patch_grid: tuple[int, int], frame_size: tuple[int, int]
) -> Heatmap:
    s = np.asarray(similarities, dtype=np.float64)
    n = patch_grid[0] * patch_grid[1]
    if s.ndim != 1 or s.size % n:
        raise InvalidInputError(f"similarity length {s.size} is not a multiple of {n} patches")
    if not 0 <= target_index < s.size // n:
        raise InvalidInputError(f"target frame {target_index} outside {s.size // n} frames")
    block = s[target_index * n:(target_index + 1) * n].reshape(patch_grid)
    return Heatmap(min_max_normalize(bilinear_resize(block, frame_size)))


def predict_center(heatmap: Heatmap, source: str = "") -> CenterPrediction:
    """Argmax pixel; ties go to the lowest row-major index."""
    flat = int(np.argmax(heatmap.grid))
    y, x = divmod(flat, heatmap.grid.shape[1])
    return CenterPrediction(x, y, source)


# ---------------------------------------------------------------------------
# export


def heatmap_to_uint8(heatmap: Heatmap) -> np.ndarray:
    return np.clip(np.floor(heatmap.grid * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_heatmap_png(heatmap: Heatmap, path) -> Path:
    from PIL import Image

    path = Path(path)
    Image.fromarray(heatmap_to_uint8(heatmap), mode="L").save(path)
    return path


def write_heatmap_raw(heatmap: Heatmap, path) -> Path:
    """Row-major float32 little-endian grid after a 16-byte header (magic, H, W)."""
    path = Path(path)
    h, w = heatmap.grid.shape
    path.write_bytes(
        _HEATMAP_HEADER.pack(HEATMAP_MAGIC, h, w) + heatmap.grid.astype("<f4").tobytes(order="C")
    )
    return path


def read_heatmap_raw(path) -> Heatmap:
    raw = Path(path).read_bytes()
    if len(raw) < _HEATMAP_HEADER.size:
        raise ValueError(f"{path}: too short for a heatmap header")
    magic, h, w = _HEATMAP_HEADER.unpack_from(raw)
    if magic != HEATMAP_MAGIC:
        raise ValueError(f"{path}: bad heatmap magic {magic!r}")
    if len(raw) != _HEATMAP_HEADER.size + 4 * h * w:
        raise ValueError(f"{path}: payload size does not match {h} x {w}")
    grid = np.frombuffer(raw, dtype="<f4", offset=_HEATMAP_HEADER.size).reshape(h, w)
    return Heatmap(grid.astype(np.float64))


def overlay(frame: np.ndarray, heatmap: Heatmap, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend a blue-to-red rendering of the heatmap onto an RGB frame."""
    g = heatmap.grid[..., None]
    color = np.concatenate([g, np.zeros_like(g), 1.0 - g], axis=-1) * 255.0
    blend = (1.0 - alpha) * frame.astype(np.float64) + alpha * color
    return np.clip(np.floor(blend + 0.5), 0, 255).astype(np.uint8)


def write_overlay(frame: np.ndarray, heatmap: Heatmap, path, alpha: float = 0.5) -> Path:
    from PIL import Image

    path = Path(path)
    Image.fromarray(overlay(frame, heatmap, alpha)).save(path)
    return path
