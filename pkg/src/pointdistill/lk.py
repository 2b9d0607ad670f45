"""Pyramidal Lucas-Kanade point tracker (classical baseline and teacher)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy import ndimage

from .core import QueryPoint, Trajectory, Video, Window, window_frames


@dataclass(frozen=True)
class LkConfig:
    pyramid_levels: int = 3
    window_radius: int = 7
    max_iters_per_level: int = 20
    convergence_eps: float = 0.01
    min_eigen_threshold: float = 1e-4
    forward_backward_vis_eps: float = 2.0
    divergence_cap: float = 8.0

    def __post_init__(self) -> None:
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.window_radius < 2:
            raise ValueError("window_radius must be >= 2")
        if self.convergence_eps <= 0 or self.min_eigen_threshold <= 0:
            raise ValueError("convergence_eps and min_eigen_threshold must be > 0")
        if self.max_iters_per_level < 1:
            raise ValueError("max_iters_per_level must be >= 1")


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2, img.shape[1] // 2
    c = img[:2 * h, :2 * w]
    return 0.25 * (c[0::2, 0::2] + c[1::2, 0::2] + c[0::2, 1::2] + c[1::2, 1::2])


def build_pyramids(frames: np.ndarray, levels: int):
    """Box-filter pyramids with Sobel gradients, packed into (T, levels, H, W) arrays."""
    frames = np.asarray(frames, dtype=np.float64)
    T, H, W = frames.shape
    img = np.zeros((T, levels, H, W))
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    dims = np.zeros((levels, 2), dtype=np.int64)
    for t in range(T):
        cur = frames[t]
        for lv in range(levels):
            h, w = cur.shape
            if h < 2 or w < 2:
                raise ValueError(f"frame too small for {levels} pyramid levels")
            dims[lv] = (h, w)
            img[t, lv, :h, :w] = cur
            gx[t, lv, :h, :w] = ndimage.sobel(cur, axis=1, mode="nearest") / 8.0
            gy[t, lv, :h, :w] = ndimage.sobel(cur, axis=0, mode="nearest") / 8.0
            cur = _downsample(cur)
    return img, gx, gy, dims


@nb.njit(cache=True)
def _sample(im, h, w, x, y):
    if x < 0.0:
        x = 0.0
    elif x > w - 1:
        x = w - 1.0
    if y < 0.0:
        y = 0.0
    elif y > h - 1:
        y = h - 1.0
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    if x0 > w - 2:
        x0 = w - 2
    if y0 > h - 2:
        y0 = h - 2
    fx = x - x0
    fy = y - y0
    top = im[y0, x0] * (1.0 - fx) + im[y0, x0 + 1] * fx
    bot = im[y0 + 1, x0] * (1.0 - fx) + im[y0 + 1, x0 + 1] * fx
    return top * (1.0 - fy) + bot * fy


@nb.njit(cache=True)
def _pair(imA, gxA, gyA, imB, dims, px, py, levels, radius, iters, eps, min_eig, cap):
    """Track (px, py) from frame A to frame B. Returns (x, y, confidence)."""
    n = 2 * radius + 1
    tmpl = np.empty(n * n)
    tgx = np.empty(n * n)
    tgy = np.empty(n * n)
    dx = 0.0
    dy = 0.0
    conf = 0.0
    for lv in range(levels - 1, -1, -1):
        h = dims[lv, 0]
        w = dims[lv, 1]
        s = 2.0 ** lv
        cx = (px + 0.5) / s - 0.5
        cy = (py + 0.5) / s - 0.5
        a = imA[lv]
        bx = gxA[lv]
        by = gyA[lv]
        gxx = 0.0
        gxy = 0.0
        gyy = 0.0
        m = 0
        for j in range(-radius, radius + 1):
            for i in range(-radius, radius + 1):
                x = cx + i
                y = cy + j
                tmpl[m] = _sample(a, h, w, x, y)
                ix = _sample(bx, h, w, x, y)
                iy = _sample(by, h, w, x, y)
                tgx[m] = ix
                tgy[m] = iy
                gxx += ix * ix
                gxy += ix * iy
                gyy += iy * iy
                m += 1
        det = gxx * gyy - gxy * gxy
        tr = gxx + gyy
        lam = 0.5 * (tr - math.sqrt(max((gxx - gyy) ** 2 + 4.0 * gxy * gxy, 0.0)))
        if lv == 0:
            conf = min(1.0, max(lam / (n * n), 0.0) / min_eig)
        if det <= 1e-12 * max(tr * tr, 1e-300) or det <= 0.0:
            if lv == 0:
                return px, py, 0.0
            dx *= 2.0
            dy *= 2.0
            continue
        b = imB[lv]
        for _ in range(iters):
            ex = 0.0
            ey = 0.0
            m = 0
            for j in range(-radius, radius + 1):
                for i in range(-radius, radius + 1):
                    e = tmpl[m] - _sample(b, h, w, cx + dx + i, cy + dy + j)
                    ex += e * tgx[m]
                    ey += e * tgy[m]
                    m += 1
            ux = (gyy * ex - gxy * ey) / det
            uy = (gxx * ey - gxy * ex) / det
            dx += ux
            dy += uy
            if abs(dx) * s > cap or abs(dy) * s > cap or math.hypot(dx, dy) * s > cap:
                return px, py, 0.0
            if math.hypot(ux, uy) < eps:
                break
        if lv > 0:
            dx *= 2.0
            dy *= 2.0
    if math.hypot(dx, dy) > cap:
        return px, py, 0.0
    return px + dx, py + dy, conf


@nb.njit(cache=True)
def _chain(img, gx, gy, dims, qs, levels, radius, iters, eps, min_eig, cap, fb_eps,
           out_pts, out_vis, out_conf):
    n = qs.shape[0]
    L = img.shape[0]
    for q in range(n):
        x = qs[q, 0]
        y = qs[q, 1]
        out_pts[q, 0, 0] = x
        out_pts[q, 0, 1] = y
        out_vis[q, 0] = True
        out_conf[q, 0] = 1.0
        for t in range(1, L):
            nx, ny, c = _pair(img[t - 1], gx[t - 1], gy[t - 1], img[t], dims, x, y,
                              levels, radius, iters, eps, min_eig, cap)
            vis = False
            if c > 0.0:
                bx, by, cb = _pair(img[t], gx[t], gy[t], img[t - 1], dims, nx, ny,
                                   levels, radius, iters, eps, min_eig, cap)
                vis = cb > 0.0 and math.hypot(bx - x, by - y) < fb_eps
            out_pts[q, t, 0] = nx
            out_pts[q, t, 1] = ny
            out_vis[q, t] = vis
            out_conf[q, t] = c
            x = nx
            y = ny


def lk_track_pair(prev: np.ndarray, next_: np.ndarray, p, cfg: LkConfig = LkConfig()):
    """One frame-to-frame step: ((x, y), confidence)."""
    img, gx, gy, dims = build_pyramids(np.stack([prev, next_]), cfg.pyramid_levels)
    x, y, c = _pair(img[0], gx[0], gy[0], img[1], dims, float(p[0]), float(p[1]),
                    cfg.pyramid_levels, cfg.window_radius, cfg.max_iters_per_level,
                    cfg.convergence_eps, cfg.min_eigen_threshold, cfg.divergence_cap)
    return (x, y), c


def lk_track_frames(frames: np.ndarray, qarr: np.ndarray, cfg: LkConfig = LkConfig(),
                    pyramids=None):
    """Array-level chained tracking: (N, L, 2) points, (N, L) visibility, (N, L) confidence."""
    img, gx, gy, dims = pyramids if pyramids is not None else build_pyramids(
        frames, cfg.pyramid_levels)
    qarr = np.ascontiguousarray(qarr, dtype=np.float64).reshape(-1, 2)
    n, L = qarr.shape[0], img.shape[0]
    pts = np.zeros((n, L, 2))
    vis = np.zeros((n, L), dtype=np.bool_)
    conf = np.zeros((n, L))
    _chain(img, gx, gy, dims, qarr, cfg.pyramid_levels, cfg.window_radius,
           cfg.max_iters_per_level, cfg.convergence_eps, cfg.min_eigen_threshold,
           cfg.divergence_cap, cfg.forward_backward_vis_eps, pts, vis, conf)
    return pts, vis, conf


def lk_track_window(video: Video, window: Window, queries: list[QueryPoint],
                    cfg: LkConfig = LkConfig()) -> list[Trajectory]:
    frames = window_frames(video, window)
    qarr = np.array([[q.x, q.y] for q in queries], dtype=np.float64).reshape(-1, 2)
    pts, vis, conf = lk_track_frames(frames, qarr, cfg)
    return [Trajectory(q, pts[i], vis[i], confidence=conf[i]) for i, q in enumerate(queries)]
