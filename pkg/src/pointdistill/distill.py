"""Self-distillation with cycle-consistency filtered pseudo-labels.

A frozen teacher tracks detected corners through a random strided window,
re-tracks each forward endpoint back through the reversed window, and keeps
a trajectory only when it returns to within ``alpha`` pixels of its query.
The retained trajectories supervise the student through the discounted
Huber loss.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import keypoints, lk, neural
from .core import PointDistillError, QueryPoint, Trajectory, Video, Window, make_rng
from .dataio import VideoCorpus

MAX_IDLE_ATTEMPTS = 500


# ---------------------------------------------------------------------------
# teachers
# ---------------------------------------------------------------------------


@dataclass
class Teacher:
    """A frozen neural tracker or the classical LK tracker."""

    id: str
    kind: str
    params: neural.NeuralTrackerParams | None = None
    lk_config: lk.LkConfig | None = None

    def __post_init__(self) -> None:
        if self.kind == "neural":
            if self.params is None:
                raise ValueError("a neural teacher needs parameters")
            self.params = self.params.frozen()
        elif self.kind == "classical":
            self.lk_config = self.lk_config or lk.LkConfig()
        else:
            raise ValueError(f"unknown teacher kind {self.kind!r}")

    def prepare(self, frames: np.ndarray):
        """Per-window precomputation shared by forward and backward passes."""
        if self.kind == "neural":
            return neural.feature_stack(frames)
        return lk.build_pyramids(frames, self.lk_config.pyramid_levels)

    @staticmethod
    def reverse(prepared):
        if isinstance(prepared, tuple):
            img, gx, gy, dims = prepared
            return (np.ascontiguousarray(img[::-1]), np.ascontiguousarray(gx[::-1]),
                    np.ascontiguousarray(gy[::-1]), dims)
        return np.ascontiguousarray(prepared[::-1])

    def track(self, prepared, qarr: np.ndarray, want_vis: bool = True):
        """(N, L, 2) positions and (N, L) visibility for queries on the first frame."""
        if self.kind == "neural":
            pts, conf = neural.track_points(self.params, prepared, qarr, want_vis=want_vis)
            vis = conf > neural.VISIBLE_PEAK
            vis[:, 0] = True
            return pts, vis
        pts, vis, _ = lk.lk_track_frames(None, qarr, self.lk_config, pyramids=prepared)
        return pts, vis

    def track_frames(self, frames: np.ndarray, qarr: np.ndarray):
        return self.track(self.prepare(frames), qarr)


TeacherPool = list


def make_pool(name: str, params: neural.NeuralTrackerParams | None) -> list[Teacher]:
    """Pools by name: ``self``, ``lk`` or ``self+lk``."""
    members = {"self": ("self",), "lk": ("lk",), "self+lk": ("self", "lk")}
    if name not in members:
        raise PointDistillError(f"unknown teacher pool {name!r}; choose from {sorted(members)}")
    pool = []
    for m in members[name]:
        if m == "self":
            if params is None:
                raise PointDistillError("the self teacher needs initial parameters")
            pool.append(Teacher("self", "neural", params=params))
        else:
            pool.append(Teacher("lk", "classical"))
    return pool


def _check_pool(pool) -> None:
    if not pool:
        raise PointDistillError("teacher pool is empty")
    ids = [t.id for t in pool]
    if len(set(ids)) != len(ids):
        raise PointDistillError(f"teacher ids must be unique, got {ids}")


# ---------------------------------------------------------------------------
# cycle consistency
# ---------------------------------------------------------------------------


def cycle_errors(teacher: Teacher, frames: np.ndarray, qarr: np.ndarray, prepared=None):
    """Forward tracks, visibility and round-trip errors for an array of queries."""
    prepared = teacher.prepare(frames) if prepared is None else prepared
    fwd, vis = teacher.track(prepared, qarr)
    back, _ = teacher.track(Teacher.reverse(prepared), np.ascontiguousarray(fwd[:, -1]),
                            want_vis=False)
    err = np.hypot(back[:, -1, 0] - qarr[:, 0], back[:, -1, 1] - qarr[:, 1])
    return fwd, vis, err


def cycle_error(teacher: Teacher, video: Video, window: Window, q: QueryPoint):
    """Forward trajectory of ``q`` and the distance between ``q`` and its round trip."""
    frames = video.frames[window.indices]
    qarr = np.array([[q.x, q.y]], dtype=np.float64)
    fwd, vis, err = cycle_errors(teacher, frames, qarr)
    return Trajectory(q, fwd[0], vis[0]), float(err[0])


def filter_batch(errors, alpha) -> np.ndarray:
    """Keep errors strictly below ``alpha``; ``"off"`` (or None) keeps everything."""
    e = np.asarray(errors, dtype=np.float64)
    if alpha is None or alpha == "off":
        return np.ones(e.shape, dtype=bool)
    return e < float(alpha)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DistillConfig:
    alpha: float | str = 5.0
    window_len: int = 16
    stride_min: int = 1
    stride_max: int = 4
    queries: int = 64
    min_keypoints: int | None = None
    min_retained: int = 8
    total_steps: int = 20000
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.alpha != "off" and (isinstance(self.alpha, str) or not self.alpha > 0):
            raise ValueError("alpha must be > 0 or 'off'")
        if self.stride_min < 1 or self.stride_max < self.stride_min:
            raise ValueError("need 1 <= stride_min <= stride_max")
        if self.min_retained < 1:
            raise ValueError("min_retained must be >= 1")
        if self.window_len < 2 or self.queries < 1:
            raise ValueError("window_len must be >= 2 and queries >= 1")

    @property
    def required_keypoints(self) -> int:
        return self.queries if self.min_keypoints is None else self.min_keypoints

    @classmethod
    def from_experiment(cls, cfg, **overrides) -> "DistillConfig":
        keys = ("alpha", "window_len", "stride_min", "stride_max", "queries", "min_keypoints",
                "min_retained", "total_steps", "seed", "checkpoint_every")
        values = {k: getattr(cfg, k) for k in keys}
        values.update(overrides)
        return cls(**values)


def sample_window(rng: np.random.Generator, frame_count: int, length: int,
                  stride_min: int, stride_max: int) -> Window | None:
    """Uniform stride among those that fit, then a uniform start."""
    strides = [s for s in range(stride_min, stride_max + 1) if (length - 1) * s < frame_count]
    if not strides:
        return None
    s = strides[int(rng.integers(len(strides)))]
    start = int(rng.integers(frame_count - (length - 1) * s))
    return Window(start, s, length)


@dataclass(frozen=True)
class Skipped:
    reason: str
    video_id: str = ""


@dataclass
class Proposal:
    """A teacher-labelled window before filtering."""

    video_id: str
    window: Window
    queries: list[QueryPoint]
    teacher_id: str
    points: np.ndarray
    visible: np.ndarray
    cycle_errors: np.ndarray
    feats: np.ndarray | None = field(default=None, repr=False)


@dataclass
class PseudoLabelBatch:
    video_id: str
    window: Window
    queries: list[QueryPoint]
    teacher_id: str
    trajectories: list[Trajectory]
    cycle_errors: np.ndarray
    retained: np.ndarray
    feats: np.ndarray | None = field(default=None, repr=False)

    @property
    def retention_rate(self) -> float:
        return float(self.retained.mean()) if len(self.retained) else 0.0

    @property
    def labels(self) -> list[Trajectory]:
        return [t for t, keep in zip(self.trajectories, self.retained) if keep]

    @property
    def retained_queries(self) -> list[QueryPoint]:
        return [q for q, keep in zip(self.queries, self.retained) if keep]


def propose_batch(pool, corpus: VideoCorpus, cfg: DistillConfig,
                  rng: np.random.Generator) -> Proposal | Skipped:
    _check_pool(pool)
    vid = corpus.ids[int(rng.integers(len(corpus)))]
    T = corpus.frame_count(vid)
    window = sample_window(rng, T, cfg.window_len, cfg.stride_min, cfg.stride_max)
    if window is None:
        return Skipped("video too short for the window", vid)
    frames = corpus.frames(vid, window.indices)
    queries = keypoints.sample_queries(frames[0], cfg.queries, cfg.required_keypoints, rng,
                                       t0=window.start)
    if isinstance(queries, keypoints.Excluded):
        return Skipped(f"too few keypoints ({queries.found} < {queries.required})", vid)
    teacher = pool[int(rng.integers(len(pool)))] if len(pool) > 1 else pool[0]
    qarr = np.array([[q.x, q.y] for q in queries], dtype=np.float64)
    prepared = teacher.prepare(frames)
    fwd, vis, err = cycle_errors(teacher, frames, qarr, prepared)
    feats = prepared if teacher.kind == "neural" else neural.feature_stack(frames)
    return Proposal(vid, window, queries, teacher.id, fwd, vis, err, feats)


def finalize(proposal: Proposal | Skipped, alpha, min_retained: int) -> PseudoLabelBatch | Skipped:
    if isinstance(proposal, Skipped):
        return proposal
    keep = filter_batch(proposal.cycle_errors, alpha)
    if keep.sum() < min_retained:
        return Skipped(f"only {int(keep.sum())} trajectories retained", proposal.video_id)
    trajs = [Trajectory(q, proposal.points[i], proposal.visible[i])
             for i, q in enumerate(proposal.queries)]
    return PseudoLabelBatch(proposal.video_id, proposal.window, proposal.queries,
                            proposal.teacher_id, trajs, proposal.cycle_errors, keep,
                            proposal.feats)


def make_batch(pool, corpus: VideoCorpus, cfg: DistillConfig,
               rng: np.random.Generator) -> PseudoLabelBatch | Skipped:
    return finalize(propose_batch(pool, corpus, cfg, rng), cfg.alpha, cfg.min_retained)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

LOG_FIELDS = ("step", "attempt", "loss", "retention_rate", "retained", "teacher_id", "lr",
              "video_id", "start", "stride", "skipped")


@dataclass
class DistillLog:
    rows: list[dict] = field(default_factory=list)
    teacher_digests_before: dict = field(default_factory=dict)
    teacher_digests_after: dict = field(default_factory=dict)
    seconds: float = 0.0

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(r[k]) for k in LOG_FIELDS})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _digests(pool) -> dict:
    return {t.id: t.params.digest() for t in pool if t.kind == "neural"}


class _Cell:
    """Optimisation state of one run inside a (possibly shared) batch stream."""

    def __init__(self, student_init, cfg, loss_weights, adam, ckpt_dir, on_step):
        self.params = student_init.copy()
        self.cfg = cfg
        self.loss_weights = loss_weights
        self.adam = adam or neural.AdamState(base_lr=5e-5, total_steps=cfg.total_steps)
        self.log = DistillLog()
        self.ckpt_dir = Path(ckpt_dir) if ckpt_dir else None
        self.on_step = on_step
        self.idle = 0

    @property
    def done(self) -> bool:
        return len(self.log.rows) >= self.cfg.total_steps

    def offer(self, attempt: int, proposal) -> None:
        if self.done:
            return
        batch = finalize(proposal, self.cfg.alpha, self.cfg.min_retained)
        if isinstance(batch, Skipped):
            self.idle += 1
            if self.idle >= MAX_IDLE_ATTEMPTS:
                raise PointDistillError(
                    f"{MAX_IDLE_ATTEMPTS} consecutive batches skipped (last: {batch.reason}); "
                    "the corpus cannot supply usable pseudo-labels")
            return
        step = len(self.log.rows)
        lr = self.adam.lr()
        loss, grad = neural.nt_backward(self.params, None, None, batch.retained_queries,
                                        batch.labels, self.loss_weights, feats=batch.feats)
        if not math.isfinite(loss):
            raise PointDistillError(f"non-finite loss at step {step}")
        neural.adam_step(self.adam, self.params, grad)
        row = {"step": step, "attempt": attempt, "loss": float(loss),
               "retention_rate": batch.retention_rate, "retained": int(batch.retained.sum()),
               "teacher_id": batch.teacher_id, "lr": float(lr), "video_id": batch.video_id,
               "start": batch.window.start, "stride": batch.window.stride,
               "skipped": self.idle}
        self.log.rows.append(row)
        self.idle = 0
        every = self.cfg.checkpoint_every
        if self.ckpt_dir and every and (step + 1) % every == 0:
            neural.save_checkpoint(self.ckpt_dir / f"step_{step + 1:06d}.ckpt", self.params,
                                   step=step + 1, seed=self.cfg.seed)
        if self.on_step:
            self.on_step(row)


def _check_self(pool, student_init) -> None:
    _check_pool(pool)
    for t in pool:
        if t.id == "self" and t.kind == "neural":
            if not np.array_equal(t.params.vector, student_init.vector):
                raise PointDistillError("the self teacher must start from the student's parameters")


def distill_sweep(student_init: neural.NeuralTrackerParams, pool, corpus: VideoCorpus,
                  cfgs: list[DistillConfig], loss_weights: neural.LossWeights | None = None,
                  adam_factory: Callable[[DistillConfig], neural.AdamState] | None = None,
                  ckpt_dirs=None, on_step=None) -> list[tuple[neural.NeuralTrackerParams, DistillLog]]:
    """Several runs that differ only in filtering, driven by one batch stream.

    All configurations must agree on everything that shapes a proposal. Every
    run sees attempt ``j`` drawn from the stream keyed by ``(seed, j)``, so
    each result is identical to running that configuration on its own; the
    teacher work for an attempt is simply done once.
    """
    if not cfgs:
        return []
    base = cfgs[0]
    shape_keys = ("window_len", "stride_min", "stride_max", "queries", "min_keypoints", "seed")
    for c in cfgs[1:]:
        if any(getattr(c, k) != getattr(base, k) for k in shape_keys):
            raise ValueError("sweep configurations may differ only in alpha, min_retained, "
                             "total_steps and checkpoint_every")
    _check_self(pool, student_init)
    loss_weights = loss_weights or neural.LossWeights()
    ckpt_dirs = ckpt_dirs or [None] * len(cfgs)
    cells = [_Cell(student_init, c,
                   loss_weights, adam_factory(c) if adam_factory else None, d,
                   (lambda row, i=i: on_step(i, row)) if on_step else None)
             for i, (c, d) in enumerate(zip(cfgs, ckpt_dirs))]
    before = _digests(pool)
    t0 = time.perf_counter()
    attempt = 0
    while not all(c.done for c in cells):
        proposal = propose_batch(pool, corpus, base, make_rng(base.seed, "batch", attempt))
        for c in cells:
            c.offer(attempt, proposal)
        attempt += 1
    after = _digests(pool)
    if before != after:
        raise PointDistillError("teacher parameters changed during distillation")
    elapsed = time.perf_counter() - t0
    out = []
    for c in cells:
        c.log.teacher_digests_before = dict(before)
        c.log.teacher_digests_after = dict(after)
        c.log.seconds = elapsed
        out.append((c.params, c.log))
    return out


def distill_run(student_init: neural.NeuralTrackerParams, pool, corpus: VideoCorpus,
                cfg: DistillConfig, loss_weights: neural.LossWeights | None = None,
                adam: neural.AdamState | None = None, ckpt_dir=None,
                on_step=None) -> tuple[neural.NeuralTrackerParams, DistillLog]:
    """Fine-tune a copy of ``student_init`` on teacher pseudo-labels.

    Skipped batches are resampled and do not count as steps. The teacher
    pool is never modified; its parameter digests are recorded in the log.
    """
    factory = (lambda c: adam) if adam is not None else None
    return distill_sweep(student_init, pool, corpus, [cfg], loss_weights, factory,
                         [ckpt_dir], (lambda i, row: on_step(row)) if on_step else None)[0]
