from __future__ import annotations

import numpy as np
import pytest

from pointdistill import dataio, lk
from pointdistill.core import QueryPoint, Video, Window
from pointdistill.keypoints import detect

from conftest import textured


def test_identity_pair_is_fixed_point():
    img = textured(64, 64, seed=1)
    (x, y), c = lk.lk_track_pair(img, img, (30.3, 28.6))
    assert (x, y) == (30.3, 28.6)
    assert 0 < c <= 1


def test_constant_image_has_zero_confidence():
    img = np.full((64, 64), 0.5)
    _, c = lk.lk_track_pair(img, img, (30, 30))
    assert c == 0.0


def test_recovers_integer_shift():
    img = textured(96, 96, seed=2)
    moved = np.roll(img, (3, 2), axis=(0, 1))
    for k in detect(img, 30):
        if not (20 < k.x < 76 and 20 < k.y < 76):
            continue
        (x, y), c = lk.lk_track_pair(img, moved, (k.x, k.y))
        assert c > 0
        assert np.hypot(x - k.x - 2, y - k.y - 3) < 0.1


def test_translation_equivariance():
    # large enough that every pyramid level's window stays clear of the wrapped border
    img = textured(256, 256, seed=5)
    nxt = np.roll(img, (1, 2), axis=(0, 1))
    rng = np.random.default_rng(0)
    for dx, dy in [(4, 8), (-8, 4), (12, -4)]:
        a = np.roll(img, (dy, dx), axis=(0, 1))
        b = np.roll(nxt, (dy, dx), axis=(0, 1))
        for _ in range(10):
            p = rng.uniform(116, 140, 2)
            (x0, y0), _ = lk.lk_track_pair(img, nxt, p)
            (x1, y1), _ = lk.lk_track_pair(a, b, p + (dx, dy))
            assert abs(x1 - x0 - dx) < 1e-6 and abs(y1 - y0 - dy) < 1e-6


def test_divergence_returns_start_with_zero_confidence():
    img = textured(96, 96, seed=6)
    cfg = lk.LkConfig(divergence_cap=0.5)
    (x, y), c = lk.lk_track_pair(img, np.roll(img, 5, axis=1), (48.0, 48.0), cfg)
    assert c == 0.0 and (x, y) == (48.0, 48.0)


def test_identity_video_constant_trajectories():
    img = textured(64, 64, seed=3)
    v = Video("id", np.repeat(img[None], 6, axis=0))
    qs = [QueryPoint(k.x, k.y) for k in detect(img, 10)]
    for tr in lk.lk_track_window(v, Window(0, 1, 6), qs):
        np.testing.assert_array_equal(tr.points, np.repeat(tr.points[:1], 6, axis=0))
        assert tr.visible.all()


def test_window_indexing():
    T = 48
    frames = np.zeros((T, 64, 64))
    for t in range(T):
        frames[t] = np.roll(textured(64, 64, seed=9), t, axis=1)
    v = Video("v", frames)
    w = Window(4, 2, 16)
    assert list(w.indices) == list(range(4, 35, 2))
    (tr,) = lk.lk_track_window(v, w, [QueryPoint(20.0, 30.0, 4)])
    assert len(tr) == 16
    assert tr.points[0].tolist() == [20.0, 30.0]
    assert tr.points[1][0] == pytest.approx(22.0, abs=0.1)


def test_occlusion_onset_detected(target_corpus):
    corpus = dataio.VideoCorpus(target_corpus)
    hits = total = 0
    for vid in corpus.ids:
        recs = dataio.read_gt(target_corpus, vid)
        frames = corpus.frames(vid)
        gv = np.array([r.visible for r in recs])
        gp = np.array([r.points for r in recs])
        qarr = gp[:, 0]
        _, vis, _ = lk.lk_track_frames(frames, qarr)
        for i in range(len(recs)):
            on = np.flatnonzero(gv[i, :-1] & ~gv[i, 1:])
            if not gv[i, 0] or not len(on):
                continue
            t = on[0] + 1
            inside = (3 < gp[i, t, 0] < 92) and (3 < gp[i, t, 1] < 92)
            if not inside or not gv[i, :t].all():
                continue
            total += 1
            lo, hi = max(t - 1, 1), min(t + 2, frames.shape[0])
            hits += (~vis[i, lo:hi]).any()
    assert total >= 5
    assert hits / total >= 0.8
