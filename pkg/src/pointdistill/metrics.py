"""Endpoint error, Chamfer distance and threshold accuracy against ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import PointDistillError

THRESHOLDS = (4, 8, 16, 32, 64)


class MetricsError(PointDistillError):
    pass


def _pairs(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if len(p) != len(g):
        raise MetricsError(f"{len(p)} predictions for {len(g)} ground-truth points")
    if len(p) == 0:
        raise MetricsError("no points to evaluate")
    return p, g


def endpoint_errors(pred, gt) -> np.ndarray:
    p, g = _pairs(pred, gt)
    return np.hypot(p[:, 0] - g[:, 0], p[:, 1] - g[:, 1])


def mee(pred, gt) -> float:
    return float(endpoint_errors(pred, gt).mean())


def _nearest(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from every row of ``a`` to its nearest row of ``b``."""
    out = np.empty(len(a))
    for s in range(0, len(a), 512):
        d = a[s:s + 512, None, :] - b[None, :, :]
        out[s:s + 512] = np.sqrt((d * d).sum(-1)).min(axis=1)
    return out


def mcd(pred, gt) -> float:
    """Symmetric Chamfer distance, the mean of both directed averages."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if len(p) == 0 or len(g) == 0:
        raise MetricsError("Chamfer distance needs two non-empty point sets")
    return float(0.5 * (_nearest(p, g).mean() + _nearest(g, p).mean()))


def threshold_accuracies(errors) -> dict[int, float]:
    """Percent of errors strictly below each threshold."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise MetricsError("no points to evaluate")
    return {tau: float(100.0 * np.count_nonzero(e < tau) / e.size) for tau in THRESHOLDS}


def delta_avg(pred, gt) -> tuple[float, dict[int, float]]:
    acc = threshold_accuracies(endpoint_errors(pred, gt))
    return float(np.mean(list(acc.values()))), acc


@dataclass
class EvalReport:
    mee: float
    mcd: float
    delta_avg: float
    accuracies: dict = field(default_factory=dict)
    n_points: int = 0
    n_sequences: int = 0
    mode: str = "final"

    def to_json(self) -> dict:
        return {
            "mee": self.mee,
            "mcd": self.mcd,
            "delta_avg": self.delta_avg,
            "accuracies": {str(k): v for k, v in self.accuracies.items()},
            "n_points": self.n_points,
            "n_sequences": self.n_sequences,
            "mode": self.mode,
        }

    CSV_FIELDS = ("mee", "mcd", "delta_avg") + tuple(f"acc_{t}" for t in THRESHOLDS) + (
        "n_points", "n_sequences", "mode")

    def csv_row(self) -> dict:
        row = {"mee": self.mee, "mcd": self.mcd, "delta_avg": self.delta_avg,
               "n_points": self.n_points, "n_sequences": self.n_sequences, "mode": self.mode}
        row.update({f"acc_{t}": self.accuracies[t] for t in THRESHOLDS})
        return row


def _match(trajs, gt) -> list[tuple]:
    pred_by_key = {}
    for r in trajs:
        pred_by_key.setdefault(r.key, r)
    missing = [g.key for g in gt if g.key not in pred_by_key]
    gt_keys = {g.key for g in gt}
    extra = [k for k in pred_by_key if k not in gt_keys]
    if missing or extra:
        shown = ", ".join(f"{k[0]}@{k[1]}({k[2]:.3f},{k[3]:.3f})" for k in (missing + extra)[:10])
        raise MetricsError(
            f"{len(missing)} ground-truth queries without prediction and {len(extra)} "
            f"predictions without ground truth: {shown}")
    out = []
    for g in gt:
        p = pred_by_key[g.key]
        if len(p.points) != len(g.points):
            raise MetricsError(f"trajectory length mismatch for query {g.key}")
        out.append((p, g))
    return out


def evaluate(trajs, gt, mode: str = "final") -> EvalReport:
    """Pool all points of all sequences into one report.

    ``final`` compares positions at the last frame; ``all`` averages each
    query's error over its ground-truth-visible frames after the first.
    Points occluded at the evaluated frame are left out. The Chamfer term is
    computed per sequence on the visible final positions and averaged with
    the sequence point counts as weights.
    """
    if mode not in ("final", "all"):
        raise MetricsError(f"unknown evaluation mode {mode!r}")
    pairs = _match(trajs, gt)
    errors = []
    chamfer = []
    sequences = {}
    for p, g in pairs:
        sequences.setdefault(g.video_id, []).append((p, g))
    for vid in sorted(sequences):
        ps, gs = [], []
        for p, g in sequences[vid]:
            pp = np.asarray(p.points, dtype=np.float64)
            gp = np.asarray(g.points, dtype=np.float64)
            gv = np.asarray(g.visible, dtype=bool)
            if mode == "final":
                if gv[-1]:
                    errors.append(float(np.hypot(*(pp[-1] - gp[-1]))))
            else:
                sel = gv.copy()
                sel[0] = False
                if sel.any():
                    errors.append(float(np.hypot(*(pp[sel] - gp[sel]).T).mean()))
            if gv[-1]:
                ps.append(pp[-1])
                gs.append(gp[-1])
        if ps:
            chamfer.append((mcd(ps, gs), len(ps)))
    if not errors:
        raise MetricsError("no ground-truth-visible points to evaluate")
    e = np.asarray(errors)
    acc = threshold_accuracies(e)
    cd = sum(v * n for v, n in chamfer) / sum(n for _, n in chamfer)
    return EvalReport(float(e.mean()), float(cd), float(np.mean(list(acc.values()))), acc,
                      len(e), len(sequences), mode)
