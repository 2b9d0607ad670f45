"""On-disk formats: PGM frame folders, JSONL trajectories, manifests, configs.

Dataset layout::

    <root>/manifest.json
    <root>/videos/<id>/frame_00000.pgm ...
    <root>/gt/<id>.traj.jsonl          (optional)
"""

from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import PointDistillError, QueryPoint, Trajectory, Video

FRAME_RE = re.compile(r"^frame_(\d{5})\.pgm$")


class DataError(PointDistillError):
    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{path}: {reason}")


class MissingFrameError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class MalformedPgmError(DataError):
    pass


class MalformedRecordError(DataError):
    def __init__(self, path, line: int, reason: str):
        self.line = line
        super().__init__(path, f"line {line}: {reason}")


class ConfigError(PointDistillError):
    pass


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------


def _pgm_tokens(data: bytes, path, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise MalformedPgmError(path, "truncated header")
        j = i
        while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        tokens.append(data[i:j])
        i = j
    if i >= n or not data[i:i + 1].isspace():
        raise MalformedPgmError(path, "missing whitespace after header")
    return tokens, i + 1


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise MissingFrameError(path, "file not found") from None
    if data[:2] != b"P5":
        raise MalformedPgmError(path, "not a binary PGM (magic P5)")
    tokens, offset = _pgm_tokens(data, path, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise MalformedPgmError(path, "non-integer header field") from None
    if width <= 0 or height <= 0:
        raise MalformedPgmError(path, f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise MalformedPgmError(path, f"unsupported maxval {maxval}")
    body = data[offset:offset + width * height]
    if len(body) != width * height:
        raise MalformedPgmError(path, "truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width)


def write_pgm(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels, dtype=np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def quantize(frame: np.ndarray) -> np.ndarray:
    """[0, 1] floats to bytes, rounding half up."""
    v = np.floor(np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5)
    return v.astype(np.uint8)


def frame_path(video_dir, index: int) -> Path:
    return Path(video_dir) / f"frame_{index:05d}.pgm"


def read_video_bytes(path, frame_count: int | None = None) -> np.ndarray:
    """Raw (T, H, W) uint8 frames of one video directory."""
    path = Path(path)
    if not path.is_dir():
        raise MissingFrameError(path, "video directory not found")
    indices = sorted(int(m.group(1)) for p in path.iterdir() if (m := FRAME_RE.match(p.name)))
    expected = frame_count if frame_count is not None else (indices[-1] + 1 if indices else 0)
    present = set(indices)
    for i in range(expected):
        if i not in present:
            raise MissingFrameError(frame_path(path, i), "missing frame")
    if expected < 2:
        raise MissingFrameError(path, f"need at least 2 frames, found {expected}")
    frames = []
    for i in range(expected):
        f = read_pgm(frame_path(path, i))
        if frames and f.shape != frames[0].shape:
            raise DimensionMismatchError(
                frame_path(path, i), f"frame is {f.shape[1]}x{f.shape[0]}, "
                f"expected {frames[0].shape[1]}x{frames[0].shape[0]}")
        frames.append(f)
    return np.stack(frames)


def read_video(path, frame_count: int | None = None) -> Video:
    raw = read_video_bytes(path, frame_count)
    return Video(Path(path).name, raw.astype(np.float64) / 255.0)


def write_video(video: Video, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for t in range(video.frame_count):
        write_pgm(frame_path(path, t), quantize(video.frames[t]))


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

SOURCES = ("gt", "teacher", "student")


@dataclass
class TrajRecord:
    video_id: str
    query_frame: int
    x: float
    y: float
    points: list = field(default_factory=list)
    visible: list = field(default_factory=list)
    source: str = "gt"

    def __post_init__(self) -> None:
        if len(self.points) != len(self.visible):
            raise ValueError("points and visible must have equal length")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")

    @property
    def key(self) -> tuple:
        return (self.video_id, self.query_frame, self.x, self.y)

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "query": {"frame": self.query_frame, "x": self.x, "y": self.y},
            "points": [[float(p[0]), float(p[1])] for p in self.points],
            "visible": [bool(v) for v in self.visible],
            "source": self.source,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrajRecord":
        q = obj["query"]
        return cls(str(obj["video_id"]), int(q["frame"]), float(q["x"]), float(q["y"]),
                   [[float(a), float(b)] for a, b in obj["points"]],
                   [bool(v) for v in obj["visible"]], str(obj["source"]))

    @classmethod
    def from_trajectory(cls, video_id: str, traj: Trajectory, source: str,
                        query_frame: int | None = None) -> "TrajRecord":
        q = traj.query
        return cls(video_id, q.t0 if query_frame is None else query_frame, float(q.x),
                   float(q.y), traj.points.tolist(), traj.visible.tolist(), source)

    def to_trajectory(self) -> Trajectory:
        return Trajectory(QueryPoint(self.x, self.y, self.query_frame),
                          np.asarray(self.points, dtype=np.float64).reshape(-1, 2),
                          np.asarray(self.visible, dtype=bool))


def write_trajs(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")


def read_trajs(path) -> list[TrajRecord]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            try:
                rec = TrajRecord.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MalformedRecordError(path, lineno, str(exc)) from None
            if not all(math.isfinite(c) for p in rec.points for c in p):
                raise MalformedRecordError(path, lineno, "non-finite coordinate")
            out.append(rec)
    return out


# ---------------------------------------------------------------------------
# manifests and corpora
# ---------------------------------------------------------------------------


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(root, manifest: dict) -> None:
    write_json(Path(root) / "manifest.json", manifest)


def read_manifest(root) -> dict:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(root / "manifest.json", "manifest not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(root / "manifest.json", f"malformed JSON ({exc.msg})") from None
    for entry in manifest.get("videos", []):
        vdir = root / "videos" / entry["id"]
        for t in (0, int(entry["frames"]) - 1):
            if not frame_path(vdir, t).exists():
                raise MissingFrameError(frame_path(vdir, t), "listed in manifest but missing")
    return manifest


class VideoCorpus:
    """Read-only access to the frames of a dataset; never touches ground truth."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = read_manifest(self.root)
        self.entries = list(self.manifest["videos"])
        if not self.entries:
            raise DataError(self.root, "corpus has no videos")
        self.ids = [e["id"] for e in self.entries]
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def frame_bytes(self, video_id: str) -> np.ndarray:
        if video_id not in self._cache:
            entry = self.entries[self.ids.index(video_id)]
            raw = read_video_bytes(self.root / "videos" / video_id, int(entry["frames"]))
            if raw.shape[1:] != (entry["height"], entry["width"]):
                raise DimensionMismatchError(self.root / "videos" / video_id,
                                             "frame size differs from manifest")
            self._cache[video_id] = raw
        return self._cache[video_id]

    def frames(self, video_id: str, indices=None) -> np.ndarray:
        raw = self.frame_bytes(video_id)
        if indices is not None:
            raw = raw[np.asarray(indices)]
        return raw.astype(np.float64) / 255.0

    def video(self, video_id: str) -> Video:
        return Video(video_id, self.frames(video_id))

    def frame_count(self, video_id: str) -> int:
        return int(self.entries[self.ids.index(video_id)]["frames"])


def gt_path(root, video_id: str) -> Path:
    return Path(root) / "gt" / f"{video_id}.traj.jsonl"


def read_gt(root, video_id: str) -> list[TrajRecord]:
    path = gt_path(root, video_id)
    if not path.exists():
        raise DataError(path, "ground truth missing")
    return read_trajs(path)


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    # cycle-consistency threshold in px, or "off"
    alpha: float | str = 5.0
    gamma: float = 0.8
    huber_delta: float = 6.0
    occluded_weight: float = 0.2
    window_len: int = 16
    stride_min: int = 1
    stride_max: int = 4
    queries: int = 64
    # fewest detected corners for a window to be used; None means `queries`
    min_keypoints: int | None = None
    min_retained: int = 8
    lr0: float = 5e-5
    total_steps: int = 20000
    pretrain_lr: float = 1e-3
    pretrain_steps: int = 5000
    seed: int = 0
    source_videos: int = 40
    target_videos: int = 80
    eval_videos: int = 20
    width: int = 128
    height: int = 128
    frames: int = 64
    checkpoint_every: int = 0
    eval_mode: str = "final"
    # evaluation window: frames 0, eval_stride, ...; eval_length 0 spans the whole video
    eval_length: int = 0
    eval_stride: int = 1
    teacher: str = "self"

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.alpha == "off" or (not isinstance(self.alpha, str) and self.alpha > 0),
             "alpha must be > 0 or 'off'")
        need(0 < self.gamma < 1, "gamma must lie in (0, 1)")
        need(self.huber_delta > 0, "huber_delta must be > 0")
        need(0 < self.occluded_weight <= 1, "occluded_weight must lie in (0, 1]")
        need(self.window_len >= 2, "window_len must be >= 2")
        need(1 <= self.stride_min <= self.stride_max, "need 1 <= stride_min <= stride_max")
        need(self.queries >= 1, "queries must be >= 1")
        need(self.min_keypoints is None or 0 <= self.min_keypoints <= self.queries,
             "min_keypoints must lie in [0, queries]")
        need(self.min_retained >= 1, "min_retained must be >= 1")
        need(self.lr0 > 0 and self.pretrain_lr > 0, "learning rates must be > 0")
        need(self.total_steps >= 0 and self.pretrain_steps >= 0, "step counts must be >= 0")
        need(self.width >= 64 and self.height >= 64, "frames must be at least 64x64")
        need(self.frames >= 2, "frames must be >= 2")
        need(self.eval_mode in ("final", "all"), "eval_mode must be 'final' or 'all'")
        need(self.eval_length == 0 or self.eval_length >= 2, "eval_length must be 0 or >= 2")
        need(self.eval_stride >= 1, "eval_stride must be >= 1")
        need(self.teacher in TEACHER_POOLS, f"teacher must be one of {sorted(TEACHER_POOLS)}")
        return self

    @property
    def required_keypoints(self) -> int:
        return self.queries if self.min_keypoints is None else self.min_keypoints

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


TEACHER_POOLS = {"self": ("self",), "lk": ("lk",), "self+lk": ("self", "lk")}


def _coerce(name: str, value):
    f = {f.name: f for f in dataclasses.fields(ExperimentConfig)}[name]
    default = f.default
    if name == "alpha":
        if value == "off":
            return "off"
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"alpha: expected a number or 'off', got {value!r}")
    if name == "min_keypoints":
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"min_keypoints: expected an integer, got {value!r}")
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(f"{name}: unexpected boolean {value!r}")
    if isinstance(default, int):
        if isinstance(value, int):
            return value
        raise ConfigError(f"{name}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)):
            return float(value)
        raise ConfigError(f"{name}: expected a number, got {value!r}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{name}: expected a string, got {value!r}")
    return value


def load_config(path=None, cli_overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the JSON file at ``path``, then ``cli_overrides``."""
    valid = [f.name for f in dataclasses.fields(ExperimentConfig)]
    values: dict = {}
    layers = []
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
        if text.strip():
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ConfigError(f"{path}: config must be a JSON object")
            layers.append(obj)
    layers.append({k: v for k, v in (cli_overrides or {}).items() if v is not None})
    for layer in layers:
        for key, value in layer.items():
            if key not in valid:
                raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(valid)}")
            values[key] = _coerce(key, value)
    return ExperimentConfig(**values).validate()
