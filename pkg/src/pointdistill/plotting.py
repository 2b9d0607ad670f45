"""SVG figures for reports. Output is byte-stable for identical inputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "svg.hashsalt": "pointdistill",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def accuracy_bars(accuracies: dict, path, title: str = "") -> Path:
    """Bar chart of accuracy (percent) per pixel threshold."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        taus = list(accuracies)
        vals = [accuracies[t] for t in taus]
        ax.bar([str(t) for t in taus], vals, color="#4c72b0")
        for i, v in enumerate(vals):
            ax.text(i, v + 1.0, f"{v:.1f}", ha="center", va="bottom", fontsize=7)
        ax.set_ylim(0, 105)
        ax.set_xlabel("threshold (px)")
        ax.set_ylabel("points within threshold (%)")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def training_curves(rows: list[dict], path, window: int = 100, title: str = "") -> Path:
    """Smoothed loss and retention rate against optimiser step."""
    with plt.rc_context(_RC):
        fig, (a1, a2) = plt.subplots(2, 1, figsize=(5.0, 4.0), sharex=True)
        if rows:
            steps = np.array([r["step"] for r in rows])
            loss = np.array([r["loss"] for r in rows], dtype=np.float64)
            ret = np.array([r["retention_rate"] for r in rows], dtype=np.float64)
            w = max(1, min(window, len(rows)))
            kern = np.ones(w) / w
            a1.plot(steps, loss, color="#bbbbbb", lw=0.5)
            a1.plot(steps[w - 1:], np.convolve(loss, kern, mode="valid"), color="#c44e52", lw=1.2)
            a2.plot(steps[w - 1:], 100 * np.convolve(ret, kern, mode="valid"), color="#55a868")
        a1.set_ylabel("loss")
        a2.set_ylabel("retained (%)")
        a2.set_xlabel("step")
        if title:
            a1.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def ablation_bars(rows: list[dict], path, label_key: str, title: str = "") -> Path:
    """MEE and delta-avg per ablation row, with the teacher as a reference line."""
    with plt.rc_context(_RC):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(6.4, 2.8))
        labels = [str(r[label_key]) for r in rows]
        mees = [float(r["mee"]) if r.get("mee") not in (None, "") else np.nan for r in rows]
        dav = [float(r["delta_avg"]) if r.get("delta_avg") not in (None, "") else np.nan
               for r in rows]
        a1.bar(labels, mees, color="#4c72b0")
        a2.bar(labels, dav, color="#dd8452")
        teacher = [r for r in rows if r.get("teacher_mee") not in (None, "")]
        if teacher:
            a1.axhline(float(teacher[0]["teacher_mee"]), color="k", ls="--", lw=0.8,
                       label="teacher")
            a2.axhline(float(teacher[0]["teacher_delta_avg"]), color="k", ls="--", lw=0.8)
            a1.legend(frameon=False, fontsize=7)
        a1.set_ylabel("MEE (px)")
        a2.set_ylabel("delta-avg (%)")
        lo = np.nanmin(mees + [float(teacher[0]["teacher_mee"])] if teacher else mees)
        hi = np.nanmax(mees + [float(teacher[0]["teacher_mee"])] if teacher else mees)
        if np.isfinite(lo) and np.isfinite(hi) and hi > lo:
            pad = 0.5 * (hi - lo)
            a1.set_ylim(max(0.0, lo - pad), hi + pad)
        for ax in (a1, a2):
            ax.set_xlabel(label_key)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)
