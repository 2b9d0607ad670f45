"""Supervised pretraining of the neural tracker on labelled source videos."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import keypoints, neural
from .core import PointDistillError, QueryPoint, Trajectory, make_rng
from .dataio import VideoCorpus, gt_path, read_gt
from .distill import DistillConfig, DistillLog, sample_window


@dataclass
class LabelledVideo:
    points: np.ndarray   # (N, T, 2)
    visible: np.ndarray  # (N, T)


def load_labels(root, corpus: VideoCorpus) -> dict[str, LabelledVideo]:
    out = {}
    for vid in corpus.ids:
        if not gt_path(root, vid).exists():
            raise PointDistillError(f"corpus {root} has no ground truth for video {vid}")
        recs = [r for r in read_gt(root, vid) if r.query_frame == 0]
        out[vid] = LabelledVideo(np.array([r.points for r in recs], dtype=np.float64),
                                 np.array([r.visible for r in recs], dtype=bool))
    return out


def supervised_batch(corpus: VideoCorpus, labels: dict[str, LabelledVideo],
                     cfg: DistillConfig, rng: np.random.Generator):
    """A window plus ground-truth tracks of points visible and interior at its start."""
    vid = corpus.ids[int(rng.integers(len(corpus)))]
    lab = labels[vid]
    T = lab.points.shape[1]
    window = sample_window(rng, T, cfg.window_len, cfg.stride_min, cfg.stride_max)
    if window is None:
        return None
    entry = corpus.entries[corpus.ids.index(vid)]
    w, h = entry["width"], entry["height"]
    p0 = lab.points[:, window.start]
    b = keypoints.BORDER
    ok = (lab.visible[:, window.start] & (p0[:, 0] >= b) & (p0[:, 0] <= w - 1 - b)
          & (p0[:, 1] >= b) & (p0[:, 1] <= h - 1 - b))
    cand = np.flatnonzero(ok)
    if len(cand) < cfg.min_retained:
        return None
    pick = np.sort(rng.choice(cand, size=min(cfg.queries, len(cand)), replace=False))
    idx = window.indices
    queries = [QueryPoint(float(p0[i, 0]), float(p0[i, 1]), window.start) for i in pick]
    trajs = [Trajectory(q, lab.points[i, idx], lab.visible[i, idx]) for q, i in zip(queries, pick)]
    feats = neural.feature_stack(corpus.frames(vid, idx))
    return vid, window, queries, trajs, feats


def pretrain_run(init: neural.NeuralTrackerParams, corpus: VideoCorpus, labels,
                 cfg: DistillConfig, lr: float, loss_weights: neural.LossWeights | None = None,
                 on_step=None) -> tuple[neural.NeuralTrackerParams, DistillLog]:
    """``cfg.total_steps`` Adam steps on ground-truth labels (cosine schedule from ``lr``)."""
    params = init.copy()
    loss_weights = loss_weights or neural.LossWeights()
    adam = neural.AdamState(base_lr=lr, total_steps=cfg.total_steps)
    log = DistillLog()
    t0 = time.perf_counter()
    attempt = 0
    idle = 0
    while len(log.rows) < cfg.total_steps:
        batch = supervised_batch(corpus, labels, cfg, make_rng(cfg.seed, "pretrain", attempt))
        attempt += 1
        if batch is None:
            idle += 1
            if idle >= 500:
                raise PointDistillError("no usable supervised windows in the corpus")
            continue
        vid, window, queries, trajs, feats = batch
        step = len(log.rows)
        cur_lr = adam.lr()
        loss, grad = neural.nt_backward(params, None, None, queries, trajs, loss_weights,
                                        feats=feats)
        neural.adam_step(adam, params, grad)
        row = {"step": step, "attempt": attempt - 1, "loss": float(loss), "retention_rate": 1.0,
               "retained": len(queries), "teacher_id": "gt", "lr": float(cur_lr),
               "video_id": vid, "start": window.start, "stride": window.stride,
               "skipped": idle}
        log.rows.append(row)
        idle = 0
        if on_step:
            on_step(row)
    log.seconds = time.perf_counter() - t0
    return params, log
