"""Shared domain types, bilinear sampling and seeded random streams."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np


class PointDistillError(Exception):
    """Base class for all runtime failures raised by this package."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Video:
    """Grayscale frame stack, pixels in [0, 1], shape (T, H, W)."""

    id: str
    frames: np.ndarray

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3:
            raise ValueError(f"frames must be (T, H, W), got shape {frames.shape}")
        if frames.shape[0] < 2:
            raise ValueError(f"a video needs at least 2 frames, got {frames.shape[0]}")
        if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class QueryPoint:
    x: float
    y: float
    t0: int = 0
    # False for points topped up at random when the detector found too few.
    detected: bool = True


@dataclass(frozen=True)
class Window:
    """A strided run of frames: start, start+stride, ..., length frames total."""

    start: int
    stride: int
    length: int

    def __post_init__(self) -> None:
        if self.start < 0 or self.stride < 1 or self.length < 1:
            raise ValueError(f"invalid window {self}")

    @property
    def indices(self) -> np.ndarray:
        return self.start + self.stride * np.arange(self.length)

    @property
    def last(self) -> int:
        return self.start + self.stride * (self.length - 1)

    def fits(self, frame_count: int) -> bool:
        return self.last < frame_count

    @classmethod
    def full(cls, frame_count: int) -> "Window":
        return cls(0, 1, frame_count)


@dataclass
class Trajectory:
    query: QueryPoint
    points: np.ndarray
    visible: np.ndarray
    confidence: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if len(self.points) != len(self.visible):
            raise ValueError("points and visible must have equal length")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def endpoint(self) -> np.ndarray:
        return self.points[-1]


def window_frames(video: Video, window: Window) -> np.ndarray:
    if not window.fits(video.frame_count):
        raise ValueError(
            f"window ending at frame {window.last} exceeds video of {video.frame_count} frames"
        )
    return video.frames[window.indices]


# ---------------------------------------------------------------------------
# geometry and sampling
# ---------------------------------------------------------------------------


def euclid(p, q) -> float:
    return math.hypot(float(p[0]) - float(q[0]), float(p[1]) - float(q[1]))


def _cell(coord: float, size: int) -> tuple[int, int, float, bool]:
    """Left cell index, right index, fraction, and whether coord was inside the range."""
    inside = 0.0 <= coord <= size - 1
    c = min(max(coord, 0.0), float(size - 1))
    i0 = int(math.floor(c))
    if size >= 2:
        i0 = min(i0, size - 2)
    i1 = min(i0 + 1, size - 1)
    return i0, i1, c - i0, inside


def bilinear_sample(frame: np.ndarray, x: float, y: float) -> float:
    """Bilinear interpolation with coordinates clamped to the pixel rectangle."""
    return bilinear_sample_grad(frame, x, y)[0]


def bilinear_sample_grad(frame: np.ndarray, x: float, y: float) -> tuple[float, float, float]:
    """Value and partial derivatives of :func:`bilinear_sample` at (x, y).

    On an integer coordinate the cell to the right (below) is used. Along an
    axis where the coordinate was clamped the derivative is zero.
    """
    h, w = frame.shape
    if h == 0 or w == 0:
        raise ValueError("cannot sample an empty frame")
    x0, x1, fx, in_x = _cell(x, w)
    y0, y1, fy, in_y = _cell(y, h)
    a = frame[y0, x0]
    b = frame[y0, x1]
    c = frame[y1, x0]
    d = frame[y1, x1]
    top = a + (b - a) * fx
    bot = c + (d - c) * fx
    val = top + (bot - top) * fy
    dx = ((b - a) * (1.0 - fy) + (d - c) * fy) if (in_x and x1 != x0) else 0.0
    dy = (bot - top) if (in_y and y1 != y0) else 0.0
    return float(val), float(dx), float(dy)


def bilinear_sample_many(frame: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorised :func:`bilinear_sample` over coordinate arrays of equal shape."""
    h, w = frame.shape
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    x0 = np.minimum(np.floor(xs).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = frame[y0, x0] * (1.0 - fx) + frame[y0, x1] * fx
    bot = frame[y1, x0] * (1.0 - fx) + frame[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _stream_key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and a stream path.

    ``make_rng(7, "video", 3)`` always yields the same stream, independent of
    how many other streams were drawn before it.
    """
    key = _stream_key(seed)
    for part in stream:
        key = _stream_key(f"{key}/{_stream_key(part)}")
    return np.random.Generator(np.random.Philox(key=[key, _stream_key(seed)]))
