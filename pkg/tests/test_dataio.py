from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointdistill import dataio
from pointdistill.core import Video
from pointdistill.dataio import TrajRecord


def test_read_black_video(tmp_path):
    for i in range(2):
        dataio.write_pgm(tmp_path / f"frame_{i:05d}.pgm", np.zeros((4, 4), np.uint8))
    v = dataio.read_video(tmp_path)
    assert v.frame_count == 2 and np.all(v.frames == 0.0)


def test_unsupported_maxval(tmp_path):
    (tmp_path / "frame_00000.pgm").write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    dataio.write_pgm(tmp_path / "frame_00001.pgm", np.zeros((2, 2), np.uint8))
    with pytest.raises(dataio.MalformedPgmError, match="unsupported maxval"):
        dataio.read_video(tmp_path)


def test_distinct_errors(tmp_path):
    dataio.write_pgm(tmp_path / "frame_00000.pgm", np.zeros((4, 4), np.uint8))
    dataio.write_pgm(tmp_path / "frame_00002.pgm", np.zeros((4, 4), np.uint8))
    with pytest.raises(dataio.MissingFrameError, match="frame_00001"):
        dataio.read_video(tmp_path)
    dataio.write_pgm(tmp_path / "frame_00001.pgm", np.zeros((4, 5), np.uint8))
    with pytest.raises(dataio.DimensionMismatchError, match="frame_00001"):
        dataio.read_video(tmp_path)
    (tmp_path / "frame_00001.pgm").write_bytes(b"P6\n4 4\n255\n" + bytes(48))
    with pytest.raises(dataio.MalformedPgmError, match="frame_00001"):
        dataio.read_video(tmp_path)
    (tmp_path / "frame_00001.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(3))
    with pytest.raises(dataio.MalformedPgmError, match="truncated"):
        dataio.read_video(tmp_path)


def test_pgm_header_comments(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n# note\n2 1\n255\n\x00\xff")
    assert dataio.read_pgm(tmp_path / "a.pgm").tolist() == [[0, 255]]


def test_quantisation_rounds_half_up():
    q = dataio.quantize(np.array([[1.0, 0.5, 0.0, 0.25]]))
    assert q.tolist() == [[255, 128, 0, 64]]


def test_video_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    frames = rng.random((3, 9, 7))
    dataio.write_video(Video("x", frames), tmp_path / "x")
    back = dataio.read_video(tmp_path / "x")
    np.testing.assert_array_equal(back.frames, np.floor(frames * 255 + 0.5) / 255.0)
    assert np.max(np.abs(back.frames - frames)) <= 0.5 / 255 + 1e-12


def test_empty_traj_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert dataio.read_trajs(tmp_path / "e.jsonl") == []


def test_single_record_round_trip(tmp_path):
    r = TrajRecord("v", 0, 1.5, 2.25, [[1.5, 2.25], [3.0, 4.0]], [True, False], "teacher")
    dataio.write_trajs([r], tmp_path / "t.jsonl")
    assert dataio.read_trajs(tmp_path / "t.jsonl") == [r]


def _random_record(rng, i):
    n = int(rng.integers(1, 20))
    pts = (rng.standard_normal((n, 2)) * 10 ** rng.uniform(-8, 4)).tolist()
    return TrajRecord(f"v{i % 7}", int(rng.integers(0, 50)), float(rng.uniform(0, 128)),
                      float(rng.uniform(0, 128)), pts, rng.random(n).round().astype(bool).tolist(),
                      ["gt", "teacher", "student"][i % 3])


def test_thousand_records_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    recs = [_random_record(rng, i) for i in range(1000)]
    dataio.write_trajs(recs, tmp_path / "t.jsonl")
    assert dataio.read_trajs(tmp_path / "t.jsonl") == recs


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(allow_nan=False, allow_infinity=False, width=64),
                          st.floats(allow_nan=False, allow_infinity=False, width=64),
                          st.booleans()), min_size=1, max_size=10))
def test_record_json_round_trip_property(pts):
    r = TrajRecord("v", 0, pts[0][0], pts[0][1], [[a, b] for a, b, _ in pts],
                   [v for _, _, v in pts], "student")
    line = json.dumps(r.to_json())
    assert TrajRecord.from_json(json.loads(line)) == r


def test_crlf_and_malformed_line(tmp_path):
    r = TrajRecord("v", 0, 1.0, 2.0, [[1.0, 2.0]], [True], "gt")
    line = json.dumps(r.to_json())
    (tmp_path / "c.jsonl").write_bytes((line + "\r\n" + line + "\r\n").encode())
    assert dataio.read_trajs(tmp_path / "c.jsonl") == [r, r]
    (tmp_path / "m.jsonl").write_text(line + "\n{not json\n")
    with pytest.raises(dataio.MalformedRecordError, match="line 2"):
        dataio.read_trajs(tmp_path / "m.jsonl")
    bad = r.to_json()
    bad["visible"] = [True, False]
    (tmp_path / "b.jsonl").write_text(json.dumps(bad) + "\n")
    with pytest.raises(dataio.MalformedRecordError, match="line 1"):
        dataio.read_trajs(tmp_path / "b.jsonl")


def test_config_defaults(tmp_path):
    (tmp_path / "c.json").write_text("")
    cfg = dataio.load_config(tmp_path / "c.json")
    assert (cfg.alpha, cfg.window_len, cfg.queries, cfg.stride_max, cfg.lr0) == (5.0, 16, 64, 4, 5e-5)
    assert cfg.stride_min == 1 and cfg.total_steps == 20000
    assert (cfg.huber_delta, cfg.occluded_weight) == (6.0, 0.2)


def test_config_precedence(tmp_path):
    (tmp_path / "c.json").write_text('{"alpha": 2.5, "queries": 32}')
    cfg = dataio.load_config(tmp_path / "c.json", {"alpha": 7.5, "seed": None})
    assert cfg.alpha == 7.5 and cfg.queries == 32 and cfg.seed == 0
    assert dataio.load_config(None, {"alpha": "off"}).alpha == "off"


def test_config_errors(tmp_path):
    (tmp_path / "c.json").write_text('{"alhpa": 3}')
    with pytest.raises(dataio.ConfigError, match="valid keys: alpha"):
        dataio.load_config(tmp_path / "c.json")
    (tmp_path / "d.json").write_text('{"queries": "many"}')
    with pytest.raises(dataio.ConfigError, match="queries"):
        dataio.load_config(tmp_path / "d.json")
    with pytest.raises(dataio.ConfigError, match="gamma"):
        dataio.load_config(None, {"gamma": 1.5})
    (tmp_path / "e.json").write_text("[1]")
    with pytest.raises(dataio.ConfigError, match="JSON object"):
        dataio.load_config(tmp_path / "e.json")


def test_corpus_reads_frames_only(source_corpus):
    c = dataio.VideoCorpus(source_corpus)
    assert len(c) == 3
    f = c.frames(c.ids[0], [0, 2])
    assert f.shape == (2, 96, 96) and f.dtype == np.float64
    assert c.video(c.ids[1]).frame_count == 24
    m = dataio.read_manifest(source_corpus)
    assert m["domain"] == "source" and len(m["videos"]) == 3


def test_manifest_missing_frame(tmp_path, source_corpus):
    import shutil

    dst = tmp_path / "copy"
    shutil.copytree(source_corpus, dst)
    vid = dataio.read_manifest(dst)["videos"][0]["id"]
    (dst / "videos" / vid / "frame_00023.pgm").unlink()
    with pytest.raises(dataio.MissingFrameError):
        dataio.read_manifest(dst)
