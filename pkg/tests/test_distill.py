from __future__ import annotations

import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointdistill import dataio, distill, neural
from pointdistill.core import PointDistillError, QueryPoint, Video, Window, make_rng
from pointdistill.distill import DistillConfig, Skipped, Teacher, filter_batch

SMALL = dict(window_len=6, queries=16, min_retained=2, stride_max=3)


def test_filter_strict_inequality():
    assert filter_batch([0, 4.99, 5.0, 7.2], 5).tolist() == [True, True, False, False]
    assert filter_batch([0, 4.99, 5.0, 7.2], "off").all()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 50, allow_nan=False), max_size=64),
       st.floats(0.01, 20), st.floats(0.01, 20))
def test_filter_monotone(errors, a1, a2):
    lo, hi = sorted((a1, a2))
    small, big = filter_batch(errors, lo), filter_batch(errors, hi)
    assert np.all(~small | big)
    assert np.array_equal(filter_batch(errors, lo), np.asarray(errors) < lo)


class _Scripted(Teacher):
    """Forward track is fixed; the backward endpoint is query + offset."""

    def __init__(self, offset):
        self.id, self.kind, self.params, self.lk_config = "scripted", "scripted", None, None
        self.offset = np.asarray(offset, float)
        self.calls = 0

    def prepare(self, frames):
        return frames

    @staticmethod
    def reverse(prepared):
        return prepared[::-1]

    def track(self, prepared, qarr, want_vis=True):
        L = prepared.shape[0]
        self.calls += 1
        if self.calls % 2 == 1:
            self.start = qarr.copy()
            pts = np.repeat((qarr + [40.0, -3.0])[:, None], L, axis=1)
            pts[:, 0] = qarr
        else:
            pts = np.repeat(qarr[:, None], L, axis=1)
            pts[:, -1] = self.start + self.offset
        return pts, np.ones(pts.shape[:2], bool)


def test_cycle_error_arithmetic():
    v = Video("v", np.zeros((5, 16, 16)))
    tr, err = distill.cycle_error(_Scripted((3, 4)), v, Window(0, 1, 5), QueryPoint(2.0, 3.0))
    assert err == 5.0
    assert tr.endpoint.tolist() == [42.0, 0.0]


def test_cycle_error_identity_video_zero_init():
    from conftest import textured

    v = Video("v", np.repeat(textured(48, 48)[None], 6, axis=0))
    t = Teacher("self", "neural", params=neural.init_params(make_rng(0)))
    tr, err = distill.cycle_error(t, v, Window(0, 1, 6), QueryPoint(20.5, 17.0))
    assert err == 0.0 and np.all(tr.points == [20.5, 17.0])


def test_lk_cycle_error_flags_occluded_points(target_full):
    corpus = dataio.VideoCorpus(target_full)
    lk_t = Teacher("lk", "classical")
    big = total = 0
    for vid in corpus.ids:
        recs = dataio.read_gt(target_full, vid)
        gp = np.array([r.points for r in recs])
        gv = np.array([r.visible for r in recs])
        for start in (0, 16, 32, 48):
            w = Window(start, 1, 16)
            p, v = gp[:, w.indices], gv[:, w.indices]
            inb = ((p > 0) & (p < 127)).all(axis=(1, 2)) & (p[:, 0] > 8).all(1) & (p[:, 0] < 119).all(1)
            sel = np.flatnonzero(v[:, 0] & (~v[:, 1:]).any(1) & inb)
            if not len(sel):
                continue
            _, _, err = distill.cycle_errors(lk_t, corpus.frames(vid, w.indices),
                                             np.ascontiguousarray(p[sel, 0]))
            big += int((err > 5).sum())
            total += len(sel)
    assert total >= 30
    assert big / total >= 0.7


def test_sample_window_strides():
    rng = make_rng(0)
    seen = set()
    for _ in range(200):
        w = distill.sample_window(rng, 48, 16, 1, 4)
        assert w.fits(48) and 1 <= w.stride <= 3
        seen.add(w.stride)
    assert seen == {1, 2, 3}
    assert distill.sample_window(rng, 10, 16, 1, 4) is None


def _const_corpus(tmp_path):
    root = tmp_path / "const"
    dataio.write_video(Video("flat", np.full((8, 64, 64), 0.5)), root / "videos" / "flat")
    dataio.write_manifest(root, {"domain": "target", "videos": [
        {"id": "flat", "width": 64, "height": 64, "frames": 8}]})
    return dataio.VideoCorpus(root)


def test_constant_video_is_skipped(tmp_path):
    corpus = _const_corpus(tmp_path)
    pool = distill.make_pool("lk", None)
    b = distill.make_batch(pool, corpus, DistillConfig(**SMALL), make_rng(0))
    assert isinstance(b, Skipped) and "keypoints" in b.reason
    with pytest.raises(PointDistillError, match="consecutive batches skipped"):
        distill.distill_run(neural.init_params(make_rng(0)), pool, corpus,
                            DistillConfig(total_steps=1, **SMALL))


def test_batch_determinism_and_single_pool(source_corpus):
    corpus = dataio.VideoCorpus(source_corpus)
    pool = distill.make_pool("self", neural.init_params(make_rng(0)))
    cfg = DistillConfig(**SMALL)
    a = [distill.make_batch(pool, corpus, cfg, make_rng(3, "b", j)) for j in range(4)]
    b = [distill.make_batch(pool, corpus, cfg, make_rng(3, "b", j)) for j in range(4)]
    for x, y in zip(a, b):
        assert type(x) is type(y)
        if isinstance(x, distill.PseudoLabelBatch):
            assert x.teacher_id == "self"
            assert x.window == y.window and x.queries == y.queries
            assert np.array_equal(x.cycle_errors, y.cycle_errors)
            assert np.array_equal(x.retained, x.cycle_errors < 5.0)


def test_pool_validation():
    with pytest.raises(PointDistillError, match="unknown teacher pool"):
        distill.make_pool("ema", None)
    t = Teacher("lk", "classical")
    with pytest.raises(PointDistillError, match="unique"):
        distill._check_pool([t, t])
    mixed = distill.make_pool("self+lk", neural.init_params(make_rng(0)))
    assert [m.id for m in mixed] == ["self", "lk"]


def test_zero_steps_returns_init(source_corpus):
    corpus = dataio.VideoCorpus(source_corpus)
    init = neural.init_params(make_rng(1))
    out, log = distill.distill_run(init, distill.make_pool("self", init), corpus,
                                   DistillConfig(total_steps=0, **SMALL))
    assert out.vector.tobytes() == init.vector.tobytes() and log.rows == []


def test_self_teacher_must_match_student(source_corpus):
    corpus = dataio.VideoCorpus(source_corpus)
    a, b = neural.init_params(make_rng(1)), neural.init_params(make_rng(2))
    with pytest.raises(PointDistillError, match="self teacher"):
        distill.distill_run(a, distill.make_pool("self", b), corpus, DistillConfig(**SMALL))


def _pretrained_like(seed=0):
    p = neural.init_params(make_rng(seed))
    rng = np.random.default_rng(seed)
    p.W2[...] = rng.normal(0, 0.2, p.W2.shape)
    return p


def test_frozen_teacher_and_no_ground_truth(tmp_path, source_corpus, monkeypatch):
    root = tmp_path / "nogt"
    shutil.copytree(source_corpus, root)
    shutil.rmtree(root / "gt")
    corpus = dataio.VideoCorpus(root)

    def forbidden(*a, **k):
        raise AssertionError("ground truth opened during distillation")

    monkeypatch.setattr(dataio, "read_trajs", forbidden)
    monkeypatch.setattr(dataio, "read_gt", forbidden)
    init = _pretrained_like()
    pool = distill.make_pool("self", init)
    before = pool[0].params.vector.tobytes()
    student, log = distill.distill_run(init, pool, corpus,
                                       DistillConfig(total_steps=100, **SMALL),
                                       adam=neural.AdamState(base_lr=1e-3, total_steps=100))
    assert pool[0].params.vector.tobytes() == before
    assert log.teacher_digests_before == log.teacher_digests_after
    assert len(log.rows) == 100
    assert not np.array_equal(student.vector, init.vector)
    assert all(r["teacher_id"] == "self" for r in log.rows)


def test_step_zero_loss_zero_for_identical_zero_init(source_corpus):
    corpus = dataio.VideoCorpus(source_corpus)
    init = neural.init_params(make_rng(7))
    _, log = distill.distill_run(init, distill.make_pool("self", init), corpus,
                                 DistillConfig(total_steps=1, **SMALL))
    assert log.rows[0]["loss"] == 0.0


def test_student_final_iterations_reproduce_teacher_labels(source_corpus):
    corpus = dataio.VideoCorpus(source_corpus)
    init = _pretrained_like(3)
    pool = distill.make_pool("self", init)
    cfg = DistillConfig(**SMALL)
    for j in range(10):
        b = distill.make_batch(pool, corpus, cfg, make_rng(0, "batch", j))
        if isinstance(b, distill.PseudoLabelBatch):
            break
    qarr = np.array([[q.x, q.y] for q in b.retained_queries])
    _, stack, _, _, _ = neural._run(init, b.feats, qarr, want_vis=False)
    labels = np.stack([t.points for t in b.labels])
    assert np.array_equal(stack[:, :, -1], labels[:, 1:])


def test_sweep_matches_independent_runs(source_corpus):
    corpus = dataio.VideoCorpus(source_corpus)
    init = _pretrained_like(1)
    cfgs = [DistillConfig(alpha=a, total_steps=6, **SMALL) for a in ("off", 5.0)]
    swept = distill.distill_sweep(init, distill.make_pool("self", init), corpus, cfgs)
    for cfg, (params, log) in zip(cfgs, swept):
        solo, slog = distill.distill_run(init, distill.make_pool("self", init), corpus, cfg)
        assert params.vector.tobytes() == solo.vector.tobytes()
        assert [r["attempt"] for r in log.rows] == [r["attempt"] for r in slog.rows]
    assert all(r["retention_rate"] == 1.0 for r in swept[0][1].rows)


def test_mixed_pool_uses_both_teachers(source_corpus):
    corpus = dataio.VideoCorpus(source_corpus)
    init = _pretrained_like(2)
    _, log = distill.distill_run(init, distill.make_pool("self+lk", init), corpus,
                                 DistillConfig(alpha="off", total_steps=12, **SMALL))
    assert {r["teacher_id"] for r in log.rows} == {"self", "lk"}


def test_log_csv(tmp_path, source_corpus):
    corpus = dataio.VideoCorpus(source_corpus)
    init = _pretrained_like(2)
    _, log = distill.distill_run(init, distill.make_pool("self", init), corpus,
                                 DistillConfig(total_steps=3, **SMALL))
    log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0].startswith("step,attempt,loss,retention_rate")
    assert len(lines) == 4
