"""Acceptance criteria P1-P9, each reported as one PASS/FAIL line.

P5 and P6 run the full-scale experiment (corpus generation, 5000 pretraining
steps and a four-cell 20000-step alpha sweep) and take a few hours on one core.
"""

from __future__ import annotations

import hashlib
import json
import math
import time

import numpy as np
import pytest

import gradcheck
from conftest import VERDICTS
from test_metrics import naive_chamfer, naive_mee

from pointdistill import dataio, distill, keypoints, neural, synthgen
from pointdistill.cli import main
from pointdistill.core import make_rng
from pointdistill.metrics import delta_avg, mcd, mee

TINY = {"window_len": 6, "queries": 16, "min_retained": 2, "stride_max": 2,
        "width": 64, "height": 64, "frames": 12}


def verdict(capsys, cid: str, ok: bool, detail: str) -> None:
    line = f"{cid} {'PASS' if ok else 'FAIL'}: {detail}"
    VERDICTS.append(line)
    with capsys.disabled():
        print(f"\n{line}")
    assert ok, line


def _sha(path) -> str:
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# full-scale experiment shared by P4-P6
# ---------------------------------------------------------------------------

CORPORA = (("source", 40, 1, "src"), ("source", 20, 2, "src_eval"),
           ("target", 80, 3, "tgt"), ("target", 20, 4, "tgt_eval"))


@pytest.fixture(scope="module")
def corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("experiment")
    for domain, n, seed, name in CORPORA:
        assert main(["gen", "--domain", domain, "--videos", str(n), "--seed", str(seed),
                     "--out", str(root / name)]) == 0
    return root


@pytest.fixture(scope="module")
def experiment(corpora):
    root = corpora
    times = {}
    t0 = time.perf_counter()
    assert main(["pretrain", "--corpus", str(root / "src"), "--out", str(root / "pre.ckpt"),
                 "--seed", "0"]) == 0
    times["pretrain"] = time.perf_counter() - t0
    assert main(["eval", "--corpus", str(root / "src_eval"), "--ckpt", str(root / "pre.ckpt"),
                 "--out", str(root / "pre_eval")]) == 0
    t0 = time.perf_counter()
    code = main(["ablate", "--sweep", "alpha", "--corpus", str(root / "tgt"),
                 "--eval-corpus", str(root / "tgt_eval"), "--init", str(root / "pre.ckpt"),
                 "--out", str(root / "ablate"), "--seed", "0"])
    times["ablate"] = time.perf_counter() - t0
    return root, code, times


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def test_p1_gradient_oracle(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rel, grad, _ = gradcheck.check(*gradcheck.random_instance(100 + seed, n_queries=2))
        assert np.abs(grad).max() > 0
        worst = max(worst, rel)
    secs = time.perf_counter() - t0
    verdict(capsys, "P1", worst < 1e-4 and secs < 60,
            f"20 instances, max relative error {worst:.2e} (< 1e-4), {secs:.1f}s (< 60s)")


def test_p2_filter_exactness(capsys):
    cases = [
        ([0.0, 4.999999, 5.0, 5.000001, 12.0], 5.0, [True, True, False, False, False]),
        ([2.5, 2.4, 7.5], 2.5, [False, True, False]),
        ([7.4999, 7.5], 7.5, [True, False]),
        ([], 5.0, []),
        ([0.0], 0.0, [False]),
    ]
    ok = all(distill.filter_batch(e, a).tolist() == want for e, a, want in cases)
    ok &= distill.filter_batch([0.0, 5.0, 1e9], "off").tolist() == [True, True, True]
    verdict(capsys, "P2", ok, f"{len(cases)} hand-built lists incl. error == alpha rejected, "
            "'off' keeps all")


def test_p3_consistent_tracker_retention(capsys, tmp_path):
    t0 = time.perf_counter()
    root = synthgen.make_domain_corpus("source", 10, (128, 128), 64, 31, tmp_path / "trans",
                                       motion="translation")
    corpus = dataio.VideoCorpus(root)
    entries = {e["id"]: e for e in corpus.entries}
    pool = distill.make_pool("lk", None)
    cfg = distill.DistillConfig(alpha=5.0)
    b = keypoints.BORDER
    kept = total = 0
    for j in range(40):
        prop = distill.propose_batch(pool, corpus, cfg, make_rng(0, "p3", j))
        assert not isinstance(prop, distill.Skipped)
        q = np.array([[p.x, p.y] for p in prop.queries])
        truth = synthgen.track_truth(entries[prop.video_id], q, prop.window.start)
        pts = truth.points[:, prop.window.indices]
        interior = ((pts >= b) & (pts <= 127 - b)).all(axis=(1, 2))
        keep = distill.filter_batch(prop.cycle_errors, 5.0)
        kept += int(keep[interior].sum())
        total += int(interior.sum())
    secs = time.perf_counter() - t0
    rate = kept / total
    verdict(capsys, "P3", rate >= 0.95 and secs < 120,
            f"LK retains {100 * rate:.2f}% of {total} interior queries at alpha 5 (>= 95%), "
            f"{secs:.1f}s (< 120s)")


def test_p4_filtering_improves_labels(capsys, corpora):
    root = corpora / "tgt"
    corpus = dataio.VideoCorpus(root)
    entries = {e["id"]: e for e in corpus.entries}
    pool = distill.make_pool("lk", None)
    cfg = distill.DistillConfig(alpha=5.0)
    t0 = time.perf_counter()
    all_err, kept_err, n_kept, n_total = [], [], 0, 0
    batches = attempt = 0
    while batches < 50:
        prop = distill.propose_batch(pool, corpus, cfg, make_rng(0, "p4", attempt))
        attempt += 1
        if isinstance(prop, distill.Skipped):
            continue
        batches += 1
        keep = distill.filter_batch(prop.cycle_errors, 5.0)
        q = np.array([[p.x, p.y] for p in prop.queries])
        truth = synthgen.track_truth(entries[prop.video_id], q, prop.window.start)
        end, vis = truth.points[:, prop.window.last], truth.visible[:, prop.window.last]
        err = np.hypot(*(prop.points[:, -1] - end).T)
        all_err += err[vis].tolist()
        kept_err += err[vis & keep].tolist()
        n_kept += int(keep.sum())
        n_total += len(keep)
    secs = time.perf_counter() - t0
    e_all, e_kept, rate = float(np.mean(all_err)), float(np.mean(kept_err)), n_kept / n_total
    ok = e_kept <= e_all and 0.05 < rate < 1.0 and secs < 300
    verdict(capsys, "P4", ok,
            f"{batches} LK batches: retained GT error {e_kept:.3f} px <= all {e_all:.3f} px, "
            f"retention {100 * rate:.1f}% in (5%, 100%), {secs:.1f}s (< 300s)")


def test_p5_end_to_end_adaptation(capsys, experiment):
    root, code, times = experiment
    pre = json.loads((root / "pre_eval" / "report.json").read_text())
    teacher = json.loads((root / "ablate" / "teacher.json").read_text())
    student = json.loads((root / "ablate" / "cell_5" / "report.json").read_text())
    row = next(r for r in json.loads((root / "ablate" / "ablation.json").read_text())["rows"]
               if r["cell"] == "5")
    ok = (row["status"] == "ok" and row["steps_done"] == 20000 and pre["mee"] < 3.0
          and student["mee"] < teacher["mee"] and student["delta_avg"] >= teacher["delta_avg"])
    verdict(capsys, "P5", ok,
            f"source MEE {pre['mee']:.3f} px (< 3); target MEE student {student['mee']:.4f} "
            f"< teacher {teacher['mee']:.4f}; delta-avg student {student['delta_avg']:.3f} "
            f">= teacher {teacher['delta_avg']:.3f}; pretrain {times['pretrain'] / 60:.1f} min")


def test_p6_alpha_sweep(capsys, experiment):
    root, code, times = experiment
    rows = json.loads((root / "ablate" / "ablation.json").read_text())["rows"]
    cells = [r["cell"] for r in rows]
    by = {r["cell"]: r for r in rows}
    ok = (code == 0 and cells == ["off", "2.5", "5", "7.5"]
          and all(r["status"] == "ok" for r in rows)
          and by["5"]["mee"] <= by["off"]["mee"] and times["ablate"] < 7200)
    csv_lines = (root / "ablate" / "ablation.csv").read_text().splitlines()
    ok &= len(csv_lines) == 5
    verdict(capsys, "P6", ok,
            f"rows {cells}; MEE alpha 5 {by['5'].get('mee', math.nan):.4f} <= off "
            f"{by['off'].get('mee', math.nan):.4f}; sweep {times['ablate'] / 60:.1f} min (< 120)")


def test_p7_metrics_exactness(capsys):
    ok = mee([[3, 0], [0, 5]], [[0, 0], [0, 0]]) == 4.0
    ok &= mcd([[0, 0]], [[3, 4]]) == 5.0 and mcd([[1, 2], [5, 6]], [[1, 2], [5, 6]]) == 0.0
    ok &= delta_avg([[5, 0]], [[0, 0]])[0] == 80.0
    ok &= delta_avg([[4, 0]], [[0, 0]])[1][4] == 0.0
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n, m = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        p, g, q = (rng.uniform(-50, 150, (k, 2)) for k in (n, n, m))
        e = [math.hypot(*(a - b)) for a, b in zip(p, g)]
        naive_da = sum(100.0 * sum(x < t for x in e) / len(e) for t in (4, 8, 16, 32, 64)) / 5
        worst = max(worst, abs(mee(p, g) - naive_mee(p.tolist(), g.tolist())),
                    abs(mcd(p, q) - naive_chamfer(p.tolist(), q.tolist())),
                    abs(delta_avg(p, g)[0] - naive_da))
    ok &= worst <= 1e-12
    verdict(capsys, "P7", ok, f"unit examples exact; 100 brute-force instances, "
            f"max deviation {worst:.1e} (<= 1e-12)")


def test_p8_determinism(capsys, tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps(TINY))
    cfg = ["--config", str(tmp_path / "cfg.json")]
    inputs = tmp_path / "in"
    assert main(["gen", "--domain", "source", "--videos", "2", "--seed", "5",
                 "--out", str(inputs / "src"), *cfg]) == 0
    assert main(["gen", "--domain", "target", "--videos", "2", "--seed", "6",
                 "--out", str(inputs / "tgt"), *cfg]) == 0
    assert main(["pretrain", "--corpus", str(inputs / "src"), "--steps", "10",
                 "--out", str(inputs / "pre.ckpt"), *cfg]) == 0
    vid = inputs / "src" / "videos" / dataio.VideoCorpus(inputs / "src").ids[0]
    assert main(["detect", "--video", str(vid), "--max-n", "8",
                 "--out", str(inputs / "q.jsonl")]) == 0

    def commands(out):
        return {
            "gen": ["gen", "--domain", "target", "--videos", "2", "--seed", "9",
                    "--out", str(out / "gen"), *cfg],
            "pretrain": ["pretrain", "--corpus", str(inputs / "src"), "--steps", "10",
                         "--out", str(out / "pretrain" / "p.ckpt"), *cfg],
            "distill": ["distill", "--corpus", str(inputs / "tgt"), "--init",
                        str(inputs / "pre.ckpt"), "--steps", "6", "--teacher", "self+lk",
                        "--out", str(out / "distill" / "s.ckpt"), *cfg],
            "eval": ["eval", "--corpus", str(inputs / "src"), "--ckpt", str(inputs / "pre.ckpt"),
                     "--out", str(out / "eval"), *cfg],
            "ablate": ["ablate", "--sweep", "alpha", "--corpus", str(inputs / "tgt"),
                       "--eval-corpus", str(inputs / "src"), "--init", str(inputs / "pre.ckpt"),
                       "--steps", "3", "--out", str(out / "ablate"), *cfg],
            "track": ["track", "--video", str(vid), "--queries", str(inputs / "q.jsonl"),
                      "--ckpt", str(inputs / "pre.ckpt"),
                      "--out", str(out / "track" / "t.jsonl")],
            "detect": ["detect", "--video", str(vid), "--max-n", "8",
                       "--out", str(out / "detect" / "k.jsonl")],
        }

    same = []
    for name in commands(tmp_path / "a"):
        runs = []
        for rep in ("a", "b"):
            argv = commands(tmp_path / rep)[name]
            assert main(argv) == 0, name
            runs.append(_files(tmp_path / rep / name))
        assert runs[0], name
        same.append((name, runs[0] == runs[1]))
    ok = all(s for _, s in same)
    verdict(capsys, "P8", ok, "byte-identical reruns: "
            + ", ".join(f"{n} {'ok' if s else 'DIFFERS'}" for n, s in same))


def test_p9_frozen_teacher(capsys, tmp_path, target_corpus):
    corpus_root = target_corpus
    corpus = dataio.VideoCorpus(corpus_root)
    cfg = distill.DistillConfig(total_steps=100, **{k: TINY[k] for k in
                                                    ("window_len", "queries", "min_retained",
                                                     "stride_max")})
    rng = np.random.default_rng(0)
    init = neural.init_params(make_rng(0, "init"))
    init.W2[...] = rng.normal(0, 0.2, init.W2.shape)

    # library run: the pool's parameters never change
    pool = distill.make_pool("self+lk", init)
    before = hashlib.sha256(pool[0].params.vector.tobytes()).hexdigest()
    _, log = distill.distill_run(init, pool, corpus, cfg,
                                 adam=neural.AdamState(base_lr=1e-3, total_steps=100))
    after = hashlib.sha256(pool[0].params.vector.tobytes()).hexdigest()
    frozen = before == after and log.teacher_digests_before == log.teacher_digests_after

    # CLI run: the init checkpoint and recorded digests are unchanged
    neural.save_checkpoint(tmp_path / "init.ckpt", init)
    sha0 = _sha(tmp_path / "init.ckpt")
    (tmp_path / "cfg.json").write_text(json.dumps(TINY))
    assert main(["distill", "--corpus", str(corpus_root), "--init", str(tmp_path / "init.ckpt"),
                 "--steps", "20", "--out", str(tmp_path / "s.ckpt"),
                 "--config", str(tmp_path / "cfg.json")]) == 0
    echo = json.loads((tmp_path / "s.ckpt.config.json").read_text())
    frozen &= _sha(tmp_path / "init.ckpt") == sha0
    frozen &= echo["run"]["teacher_digests_before"] == echo["run"]["teacher_digests_after"]

    # step 0 of a self-teacher run from an identical (zero-output) student
    zero = neural.init_params(make_rng(3))
    _, zlog = distill.distill_run(zero, distill.make_pool("self", zero), corpus,
                                  distill.DistillConfig(total_steps=1, window_len=6, queries=16,
                                                        min_retained=2, stride_max=2))
    loss0 = zlog.rows[0]["loss"]
    verdict(capsys, "P9", frozen and loss0 == 0.0,
            f"teacher hash unchanged over 100 library steps and a CLI run: {frozen}; "
            f"self-teacher step-0 loss {loss0!r}")
