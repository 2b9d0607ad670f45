"""Run a tracker over a labelled corpus and score it."""

from __future__ import annotations

import numpy as np

from .core import PointDistillError, Window
from .dataio import TrajRecord, VideoCorpus, gt_path, read_gt
from .distill import Teacher
from .metrics import EvalReport, evaluate


def eval_window(frame_count: int, length: int = 0, stride: int = 1) -> Window:
    """Frames 0, stride, ... ; ``length`` 0 means as many as fit."""
    if length <= 0:
        length = (frame_count - 1) // stride + 1
    w = Window(0, stride, length)
    if not w.fits(frame_count):
        raise PointDistillError(f"evaluation window {w} does not fit {frame_count} frames")
    return w


def predict_corpus(tracker: Teacher, corpus: VideoCorpus, root, source: str = "student",
                   length: int = 0, stride: int = 1) -> tuple[list[TrajRecord], list[TrajRecord]]:
    """Track every ground-truth query of every video; returns (predictions, ground truth)."""
    preds, gts = [], []
    for vid in corpus.ids:
        if not gt_path(root, vid).exists():
            raise PointDistillError(f"corpus {root} has no ground truth for video {vid}")
        recs = [r for r in read_gt(root, vid) if r.query_frame == 0]
        window = eval_window(corpus.frame_count(vid), length, stride)
        idx = window.indices
        frames = corpus.frames(vid, idx)
        qarr = np.array([[r.x, r.y] for r in recs], dtype=np.float64).reshape(-1, 2)
        pts, vis = tracker.track_frames(frames, qarr)
        for i, r in enumerate(recs):
            preds.append(TrajRecord(vid, 0, r.x, r.y, pts[i].tolist(), vis[i].tolist(), source))
            gts.append(TrajRecord(vid, 0, r.x, r.y, [r.points[t] for t in idx],
                                  [r.visible[t] for t in idx], "gt"))
    return preds, gts


def evaluate_tracker(tracker: Teacher, corpus: VideoCorpus, root, mode: str = "final",
                     length: int = 0, stride: int = 1) -> tuple[EvalReport, list[TrajRecord]]:
    preds, gts = predict_corpus(tracker, corpus, root, length=length, stride=stride)
    return evaluate(preds, gts, mode), preds
