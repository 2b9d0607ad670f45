"""Harris corner detection and query sampling for training windows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import QueryPoint

HARRIS_K = 0.04
REL_THRESHOLD = 0.01
NMS_RADIUS = 5.0
BORDER = 8
_GAUSS3 = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float


@dataclass(frozen=True)
class Excluded:
    """Returned instead of queries when a frame has too few corners."""

    found: int
    required: int


def harris_response(frame: np.ndarray, k: float = HARRIS_K) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    ix = ndimage.sobel(f, axis=1, mode="nearest") / 8.0
    iy = ndimage.sobel(f, axis=0, mode="nearest") / 8.0
    sxx = ndimage.correlate(ix * ix, _GAUSS3, mode="nearest")
    syy = ndimage.correlate(iy * iy, _GAUSS3, mode="nearest")
    sxy = ndimage.correlate(ix * iy, _GAUSS3, mode="nearest")
    tr = sxx + syy
    return sxx * syy - sxy * sxy - k * tr * tr


def _refine(r: np.ndarray, y: int, x: int) -> tuple[float, float]:
    def offset(lo, mid, hi):
        curv = lo - 2.0 * mid + hi
        if curv >= 0.0:
            return 0.0
        return float(np.clip(0.5 * (lo - hi) / curv, -0.5, 0.5))

    return (offset(r[y, x - 1], r[y, x], r[y, x + 1]),
            offset(r[y - 1, x], r[y, x], r[y + 1, x]))


def detect(frame: np.ndarray, max_n: int, border: int = BORDER) -> list[Keypoint]:
    """Harris corners, strongest first.

    Local maxima above 1% of the strongest response are refined to subpixel
    accuracy with a per-axis parabola fit (offset clamped to half a pixel),
    then thinned greedily so no two survivors lie within 5 px.
    """
    f = np.asarray(frame, dtype=np.float64)
    h, w = f.shape
    if h < 16 or w < 16:
        raise ValueError(f"frame must be at least 16x16, got {w}x{h}")
    r = harris_response(f)
    rmax = float(r.max())
    if rmax <= 0.0 or max_n <= 0:
        return []
    thr = REL_THRESHOLD * rmax
    peaks = (r >= thr) & (r == ndimage.maximum_filter(r, size=3, mode="nearest"))
    b = max(int(border), 1)
    peaks[:b, :] = False
    peaks[-b:, :] = False
    peaks[:, :b] = False
    peaks[:, -b:] = False
    ys, xs = np.nonzero(peaks)
    scores = r[ys, xs]
    order = np.lexsort((xs, ys, -scores))

    kept: list[Keypoint] = []
    kept_xy = np.empty((0, 2))
    for i in order:
        dx, dy = _refine(r, int(ys[i]), int(xs[i]))
        p = np.array([xs[i] + dx, ys[i] + dy])
        if len(kept_xy) and np.min(np.hypot(*(kept_xy - p).T)) <= NMS_RADIUS:
            continue
        kept.append(Keypoint(float(p[0]), float(p[1]), float(scores[i])))
        kept_xy = np.vstack([kept_xy, p])
        if len(kept) >= max_n:
            break
    return kept


def sample_queries(frame: np.ndarray, n: int, min_required: int, rng: np.random.Generator,
                   t0: int = 0) -> list[QueryPoint] | Excluded:
    """Pick ``n`` query points among detected corners.

    Frames with fewer than ``min_required`` corners are excluded. When there
    are at least ``min_required`` but fewer than ``n`` corners, all of them
    are used and the rest are uniform random points marked ``detected=False``.
    """
    if n < 1 or min_required > n:
        raise ValueError("need n >= 1 and min_required <= n")
    kps = detect(frame, max_n=10 * n)
    if len(kps) < min_required:
        return Excluded(len(kps), min_required)
    if len(kps) >= n:
        pick = np.sort(rng.choice(len(kps), size=n, replace=False))
        return [QueryPoint(kps[i].x, kps[i].y, t0) for i in pick]
    h, w = np.asarray(frame).shape
    out = [QueryPoint(k.x, k.y, t0) for k in kps]
    extra = n - len(kps)
    xs = rng.uniform(BORDER, w - 1 - BORDER, size=extra)
    ys = rng.uniform(BORDER, h - 1 - BORDER, size=extra)
    out += [QueryPoint(float(x), float(y), t0, detected=False) for x, y in zip(xs, ys)]
    return out
