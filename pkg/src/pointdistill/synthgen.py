"""Synthetic two-domain video corpora with exact ground-truth trajectories.

Every video is a canonical texture pushed through a closed-form warp
(per-frame affine plus smooth Gaussian displacement bumps). Because the warp
maps canonical coordinates straight to frame coordinates, ground truth is
evaluated, never integrated.

The *source* domain has busy high-contrast texture and near-rigid motion. The
*target* domain has smooth low-contrast texture, flickering gain, a moving
specular highlight, an opaque occluder sweeping through, and non-rigid bumps.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import dataio
from .core import PointDistillError, Video, make_rng
from .keypoints import detect

MARGIN = 48
GRID_STRIDE = 8
MAX_CORNER_POINTS = 64
INVERSE_ITERS = 20
INVERSE_TOL = 1e-6


# ---------------------------------------------------------------------------
# warps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bump:
    center: tuple[float, float]
    amplitude: tuple[float, float]
    sigma: float
    omega: float
    phase: float

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ValueError("bump sigma must be positive")


@dataclass(frozen=True)
class WarpSpec:
    """frame(t) = affine[t] @ canonical + translation[t] + sum of bumps."""

    affine: np.ndarray
    translation: np.ndarray
    bumps: tuple[Bump, ...] = ()

    def __post_init__(self) -> None:
        a = np.asarray(self.affine, dtype=np.float64)
        b = np.asarray(self.translation, dtype=np.float64)
        if a.ndim != 3 or a.shape[1:] != (2, 2) or b.shape != (a.shape[0], 2):
            raise ValueError("affine must be (T, 2, 2) and translation (T, 2)")
        if not (np.allclose(a[0], np.eye(2), atol=0, rtol=0) and np.all(b[0] == 0)):
            raise ValueError("warp must be the identity at t=0")
        object.__setattr__(self, "affine", a)
        object.__setattr__(self, "translation", b)
        object.__setattr__(self, "bumps", tuple(self.bumps))

    @property
    def frame_count(self) -> int:
        return self.affine.shape[0]

    @classmethod
    def translation_only(cls, per_frame, T: int) -> "WarpSpec":
        t = np.arange(T, dtype=np.float64)[:, None]
        return cls(np.repeat(np.eye(2)[None], T, axis=0), t * np.asarray(per_frame, float))

    def bump_displacement(self, canonical: np.ndarray, t: int) -> np.ndarray:
        c = np.asarray(canonical, dtype=np.float64)
        out = np.zeros_like(c)
        for bp in self.bumps:
            s = 0.5 * (math.sin(bp.omega * t + bp.phase) - math.sin(bp.phase))
            d2 = ((c - np.asarray(bp.center)) ** 2).sum(axis=-1)
            g = np.exp(-d2 / (2.0 * bp.sigma * bp.sigma)) * s
            out += g[..., None] * np.asarray(bp.amplitude)
        return out


def warp_points(spec: WarpSpec, canonical: np.ndarray, t: int) -> np.ndarray:
    c = np.asarray(canonical, dtype=np.float64)
    return c @ spec.affine[t].T + spec.translation[t] + spec.bump_displacement(c, t)


def warp_point(spec: WarpSpec, canonical, t: int) -> tuple[float, float]:
    if not 0 <= t < spec.frame_count:
        raise ValueError(f"frame {t} outside warp of {spec.frame_count} frames")
    p = warp_points(spec, np.asarray(canonical, dtype=np.float64)[None], t)[0]
    return float(p[0]), float(p[1])


def inverse_warp(spec: WarpSpec, frame_pts: np.ndarray, t: int) -> np.ndarray:
    """Canonical coordinates of frame points, by fixed-point iteration.

    Bump amplitudes are kept at most 0.2 sigma, which keeps the iteration a
    contraction.
    """
    y = np.asarray(frame_pts, dtype=np.float64)
    a = spec.affine[t]
    det = float(np.linalg.det(a))
    if abs(det) < 1e-6:
        raise PointDistillError(f"degenerate affine at frame {t} (|det| = {abs(det):.3g})")
    ainv_t = np.linalg.inv(a).T
    base = y - spec.translation[t]
    c = base @ ainv_t
    if not spec.bumps:
        return c
    for _ in range(INVERSE_ITERS):
        c = (base - spec.bump_displacement(c, t)) @ ainv_t
        if np.max(np.abs(warp_points(spec, c, t) - y)) < INVERSE_TOL:
            break
    return c


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Specular:
    centers: np.ndarray  # (T, 2) frame coordinates
    intensity: float
    sigma: float


@dataclass(frozen=True)
class Occluder:
    centers: np.ndarray  # (T, 2) frame coordinates
    radii: tuple[float, float]
    fill: float

    def covers(self, pts: np.ndarray, t: int) -> np.ndarray:
        d = (np.asarray(pts, dtype=np.float64) - self.centers[t]) / np.asarray(self.radii)
        return (d ** 2).sum(axis=-1) <= 1.0


@dataclass(frozen=True)
class SceneSpec:
    texture_seed: int
    style: str  # "source" | "target"
    gain: np.ndarray | None = None  # (T,), defaults to all ones
    specular: Specular | None = None
    occluder: Occluder | None = None
    noise_std: float = 0.0


@dataclass
class GroundTruth:
    canonical: np.ndarray  # (N, 2)
    points: np.ndarray  # (N, T, 2)
    visible: np.ndarray  # (N, T)


def make_texture(style: str, seed: int, width: int, height: int) -> np.ndarray:
    """Canonical texture covering the frame plus a MARGIN on every side."""
    rng = make_rng(seed, "texture")
    H = height + 2 * MARGIN
    W = width + 2 * MARGIN
    if style == "source":
        img = np.zeros((H, W))
        for spacing, weight in ((16, 0.45), (8, 0.35), (4, 0.2)):
            lat = rng.random((H // spacing + 4, W // spacing + 4))
            up = ndimage.zoom(lat, spacing, order=3, mode="nearest")
            img += weight * up[:H, :W]
        lo, hi = np.percentile(img, [1, 99])
        return np.clip(0.05 + 0.9 * (img - lo) / (hi - lo), 0.0, 1.0)
    if style == "target":
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        img = np.zeros((H, W))
        for _ in range(60):
            cx, cy = rng.uniform(0, W), rng.uniform(0, H)
            s = rng.uniform(4.0, 12.0)
            img += rng.uniform(-1, 1) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
        lat = rng.random((H // 4 + 4, W // 4 + 4))
        fine = ndimage.zoom(lat, 4, order=3, mode="nearest")[:H, :W]
        img = img / (np.abs(img).max() + 1e-12) + 0.35 * (fine - 0.5)
        lo, hi = np.percentile(img, [1, 99])
        return np.clip(0.35 + 0.3 * (img - lo) / (hi - lo), 0.0, 1.0)
    raise ValueError(f"unknown texture style {style!r}")


def _sample_texture(tex: np.ndarray, canonical: np.ndarray) -> np.ndarray:
    coords = [canonical[..., 1] + MARGIN, canonical[..., 0] + MARGIN]
    return ndimage.map_coordinates(tex, coords, order=1, mode="nearest")


def render(scene: SceneSpec, warp: WarpSpec, dims: tuple[int, int], T: int,
           rng: np.random.Generator, video_id: str = "synthetic") -> tuple[Video, GroundTruth]:
    """Render T frames of (width, height) = dims and the matching ground truth."""
    width, height = dims
    if width < 64 or height < 64:
        raise ValueError("frames must be at least 64x64")
    if T < 2 or warp.frame_count < T:
        raise ValueError("need T >= 2 and a warp covering every frame")
    tex = make_texture(scene.style, scene.texture_seed, width, height)
    gain = np.ones(T) if scene.gain is None else np.asarray(scene.gain, dtype=np.float64)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    pix = np.stack([xx, yy], axis=-1)
    frames = np.empty((T, height, width))
    for t in range(T):
        canon = inverse_warp(warp, pix.reshape(-1, 2), t).reshape(height, width, 2)
        img = _sample_texture(tex, canon) * gain[t]
        if scene.specular is not None:
            sp = scene.specular
            d2 = ((pix - sp.centers[t]) ** 2).sum(axis=-1)
            img = img + sp.intensity * np.exp(-d2 / (2.0 * sp.sigma ** 2))
        if scene.noise_std > 0:
            img = img + rng.normal(0.0, scene.noise_std, size=img.shape)
        img = np.clip(img, 0.0, 1.0)
        if scene.occluder is not None:
            img[scene.occluder.covers(pix, t)] = scene.occluder.fill
        frames[t] = img

    g = np.arange(GRID_STRIDE // 2, min(width, height), GRID_STRIDE, dtype=np.float64)
    gx, gy = np.meshgrid(g[g < width], g[g < height])
    canonical = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    corners = detect(frames[0], MAX_CORNER_POINTS)
    if corners:
        canonical = np.vstack([canonical, [[k.x, k.y] for k in corners]])
    gt = ground_truth(warp, scene, canonical, (width, height), T)
    return Video(video_id, frames), gt


def ground_truth(warp: WarpSpec, scene: SceneSpec, canonical: np.ndarray,
                 dims: tuple[int, int], T: int) -> GroundTruth:
    width, height = dims
    pts = np.stack([warp_points(warp, canonical, t) for t in range(T)], axis=1)
    inside = ((pts[..., 0] >= 0) & (pts[..., 0] <= width - 1)
              & (pts[..., 1] >= 0) & (pts[..., 1] <= height - 1))
    vis = inside.copy()
    if scene.occluder is not None:
        for t in range(T):
            vis[:, t] &= ~scene.occluder.covers(pts[:, t], t)
    return GroundTruth(np.asarray(canonical, dtype=np.float64), pts, vis)


# ---------------------------------------------------------------------------
# domain randomisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenParams:
    domain: str
    width: int = 128
    height: int = 128
    frames: int = 64
    motion: str = "default"  # "default" | "translation"
    max_speed: float = 1.0  # px / frame


def _about_center(mats: np.ndarray, center: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Translation that makes each affine act about ``center`` then moves by ``shift``."""
    return center - mats @ center + shift


def _linear_path(rng, T, width, height, reach):
    """A straight path that crosses the frame once, entering and leaving it."""
    ang = rng.uniform(0, 2 * np.pi)
    d = np.array([math.cos(ang), math.sin(ang)])
    mid = np.array([rng.uniform(0.3, 0.7) * width, rng.uniform(0.3, 0.7) * height])
    span = 0.5 * math.hypot(width, height) + reach
    t_mid = rng.uniform(0.3, 0.7) * (T - 1)
    speed = 2.0 * span / rng.uniform(0.8 * T, 1.6 * T)
    t = np.arange(T, dtype=np.float64)[:, None]
    return mid + (t - t_mid) * speed * d


def random_scene(params: GenParams, seed: int, index: int) -> tuple[SceneSpec, WarpSpec]:
    rng = make_rng(seed, params.domain, params.motion, index)
    T, width, height = params.frames, params.width, params.height
    t = np.arange(T, dtype=np.float64)
    center = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    speed = rng.uniform(0.2, params.max_speed)
    ang = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([math.cos(ang), math.sin(ang)])
    texture_seed = int(rng.integers(0, 2**31 - 1))

    if params.motion == "translation":
        warp = WarpSpec.translation_only(vel, T)
        return SceneSpec(texture_seed, "source" if params.domain == "source" else "target"), warp

    if params.domain == "source":
        rot = np.deg2rad(rng.uniform(-0.1, 0.1)) * t
        scale = 1.0 + rng.uniform(-0.001, 0.001) * t
        mats = np.stack([np.array([[s * math.cos(r), -s * math.sin(r)],
                                   [s * math.sin(r), s * math.cos(r)]])
                         for r, s in zip(rot, scale)])
        mats[0] = np.eye(2)
        shift = t[:, None] * vel
        trans = np.stack([_about_center(m, center, sh) for m, sh in zip(mats, shift)])
        trans[0] = 0.0
        return SceneSpec(texture_seed, "source"), WarpSpec(mats, trans)

    if params.domain != "target":
        raise ValueError(f"unknown domain {params.domain!r}")
    # breathing: slow periodic scale change about the centre plus drift
    period = rng.uniform(24, 48)
    breathe = 0.02 * rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * t / period)
    rot = np.deg2rad(rng.uniform(-0.1, 0.1)) * t
    mats = np.stack([np.array([[(1 + b) * math.cos(r), -(1 + b) * math.sin(r)],
                               [(1 + b) * math.sin(r), (1 + b) * math.cos(r)]])
                     for r, b in zip(rot, breathe)])
    mats[0] = np.eye(2)
    shift = t[:, None] * vel
    trans = np.stack([_about_center(m, center, sh) for m, sh in zip(mats, shift)])
    trans[0] = 0.0
    bumps = []
    for _ in range(int(rng.integers(3, 6))):
        sigma = rng.uniform(10.0, 25.0)
        amp_mag = rng.uniform(0.1, 0.2) * sigma
        a = rng.uniform(0, 2 * np.pi)
        bumps.append(Bump(
            center=(float(rng.uniform(0, width)), float(rng.uniform(0, height))),
            amplitude=(amp_mag * math.cos(a), amp_mag * math.sin(a)),
            sigma=float(sigma),
            omega=float(2 * np.pi / rng.uniform(16, 48)),
            phase=float(rng.uniform(0, 2 * np.pi)),
        ))
    warp = WarpSpec(mats, trans, tuple(bumps))

    gain = 1.0 + 0.25 * np.sin(2 * np.pi * t / rng.uniform(8, 32) + rng.uniform(0, 2 * np.pi))
    gain += rng.uniform(-0.2, 0.2, size=T)
    gain = np.clip(gain, 0.6, 1.4)
    specular = None
    if rng.random() < 0.8:
        sig = rng.uniform(6.0, 12.0)
        specular = Specular(_linear_path(rng, T, width, height, 3 * sig),
                            float(rng.uniform(0.4, 0.8)), float(sig))
    occluder = None
    if rng.random() < 0.7:
        radii = (float(rng.uniform(10, 22)), float(rng.uniform(10, 22)))
        occluder = Occluder(_linear_path(rng, T, width, height, max(radii)),
                            radii, float(rng.uniform(0.05, 0.2)))
    scene = SceneSpec(texture_seed, "target", gain, specular, occluder, noise_std=0.01)
    return scene, warp


def scene_for(entry: dict) -> tuple[SceneSpec, WarpSpec]:
    """Rebuild the generator inputs of one manifest entry."""
    gen = entry["generator"]
    params = GenParams(**gen["params"])
    return random_scene(params, int(gen["seed"]), int(gen["index"]))


def track_truth(entry: dict, qarr: np.ndarray, t0: int) -> GroundTruth:
    """Exact tracks of arbitrary points seen in frame ``t0`` of a generated video."""
    scene, warp = scene_for(entry)
    canonical = inverse_warp(warp, np.asarray(qarr, dtype=np.float64).reshape(-1, 2), t0)
    return ground_truth(warp, scene, canonical, (entry["width"], entry["height"]),
                        entry["frames"])


def video_id(domain: str, seed: int, index: int) -> str:
    return f"{domain}-s{seed}-{index:04d}"


def _generate_one(args) -> dict:
    params, seed, index, out = args
    vid = video_id(params.domain, seed, index)
    scene, warp = random_scene(params, seed, index)
    video, gt = render(scene, warp, (params.width, params.height), params.frames,
                       make_rng(seed, "noise", params.domain, index), video_id=vid)
    dataio.write_video(video, Path(out) / "videos" / vid)
    records = [
        dataio.TrajRecord(vid, 0, float(gt.points[i, 0, 0]), float(gt.points[i, 0, 1]),
                          gt.points[i].tolist(), gt.visible[i].tolist(), "gt")
        for i in range(len(gt.canonical))
    ]
    dataio.write_trajs(records, Path(out) / "gt" / f"{vid}.traj.jsonl")
    return {
        "id": vid,
        "width": params.width,
        "height": params.height,
        "frames": params.frames,
        "domain": params.domain,
        "generator": {"params": asdict(params), "seed": seed, "index": index},
    }


def make_domain_corpus(domain: str, n_videos: int, dims: tuple[int, int], T: int, seed: int,
                       out, motion: str = "default", workers: int | None = None) -> Path:
    """Write a DatasetLayout corpus of ``n_videos`` videos under ``out``."""
    out = Path(out)
    if out.exists() and any(p.name != ".lock" for p in out.iterdir()):
        raise PointDistillError(f"output directory {out} is not empty")
    if domain not in ("source", "target"):
        raise PointDistillError(f"unknown domain {domain!r}")
    params = GenParams(domain, dims[0], dims[1], T, motion)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(params, seed, i, str(out)) for i in range(n_videos)]
    workers = workers or int(os.environ.get("POINTDISTILL_WORKERS", "1"))
    if workers > 1 and n_videos > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_generate_one, jobs))
    else:
        entries = [_generate_one(j) for j in jobs]
    dataio.write_manifest(out, {"domain": domain, "seed": seed, "videos": entries})
    return out
