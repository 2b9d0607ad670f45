"""Learned iterative-refinement point tracker, its loss, gradients and optimiser.

The tracker compares a template (intensity and gradient patches cut from the
window's first frame) against a 9x9 neighbourhood of candidate offsets around
the current estimate and feeds the resulting correlation map to a one hidden
layer tanh MLP that predicts a position update. Four such refinement steps are
run per frame; every intermediate estimate is kept so the loss can supervise
each of them.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _ntkernel as _k
from .core import PointDistillError, QueryPoint, Trajectory, Video, Window, window_frames

N_INPUT = _k.NIN
HIDDEN = 32
N_OUT = 2
ITERATIONS = 4
STEP_CLAMP = 4.0
VISIBLE_PEAK = 0.5

_SHAPES = {
    "W1": (N_INPUT, HIDDEN),
    "b1": (HIDDEN,),
    "W2": (HIDDEN, N_OUT),
    "b2": (N_OUT,),
}
N_PARAMS = sum(int(np.prod(s)) for s in _SHAPES.values())

ARCH = {
    "patch": _k.PATCH,
    "search_radius": _k.RADIUS,
    "iterations": ITERATIONS,
    "hidden": HIDDEN,
    "activation": "tanh",
    "step_clamp": STEP_CLAMP,
    "n_params": N_PARAMS,
}


@dataclass
class NeuralTrackerParams:
    """Flat parameter vector; W1, b1, W2, b2 are views into it."""

    vector: np.ndarray

    def __post_init__(self) -> None:
        self.vector = np.ascontiguousarray(self.vector, dtype=np.float64)
        if self.vector.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} parameters, got {self.vector.shape}")

    def _view(self, name: str) -> np.ndarray:
        start = 0
        for key, shape in _SHAPES.items():
            size = int(np.prod(shape))
            if key == name:
                return self.vector[start:start + size].reshape(shape)
            start += size
        raise KeyError(name)

    @property
    def W1(self) -> np.ndarray:
        return self._view("W1")

    @property
    def b1(self) -> np.ndarray:
        return self._view("b1")

    @property
    def W2(self) -> np.ndarray:
        return self._view("W2")

    @property
    def b2(self) -> np.ndarray:
        return self._view("b2")

    def copy(self) -> "NeuralTrackerParams":
        return NeuralTrackerParams(self.vector.copy())

    def frozen(self) -> "NeuralTrackerParams":
        """Read-only copy, used for teachers."""
        out = self.copy()
        out.vector.setflags(write=False)
        return out

    def digest(self) -> str:
        return hashlib.sha256(self.vector.astype("<f8").tobytes()).hexdigest()


def init_params(rng: np.random.Generator) -> NeuralTrackerParams:
    """Glorot-uniform hidden layer and an all-zero output layer.

    The zero output layer makes a freshly initialised tracker the identity
    tracker: every update is zero.
    """
    bound = math.sqrt(6.0 / (N_INPUT + HIDDEN))
    vec = np.zeros(N_PARAMS)
    p = NeuralTrackerParams(vec)
    p.W1[...] = rng.uniform(-bound, bound, size=_SHAPES["W1"])
    return p


@dataclass(frozen=True)
class LossWeights:
    huber_delta: float = 6.0
    occluded_weight: float = 0.2
    gamma: float = 0.8

    def __post_init__(self) -> None:
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be > 0")
        if not 0 < self.occluded_weight <= 1:
            raise ValueError("occluded_weight must lie in (0, 1]")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")

    def discounts(self, iterations: int = ITERATIONS) -> np.ndarray:
        k = np.arange(1, iterations + 1)
        return self.gamma ** (iterations - k).astype(np.float64)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def feature_stack(frames: np.ndarray) -> np.ndarray:
    """(L, H, W) frames -> contiguous (L, 3, H, W) intensity/gradient stack."""
    frames = np.asarray(frames, dtype=np.float64)
    out = np.empty((frames.shape[0], 3) + frames.shape[1:])
    for t, f in enumerate(frames):
        out[t, 0] = f
        out[t, 1] = ndimage.sobel(f, axis=1, mode="nearest") / 8.0
        out[t, 2] = ndimage.sobel(f, axis=0, mode="nearest") / 8.0
    return out


@dataclass
class ForwardResult:
    trajectories: list[Trajectory]
    # (N, L-1, K, 2): estimate after every refinement iteration, frames 1..L-1
    stack: np.ndarray
    confidences: np.ndarray = field(repr=False)


def _query_array(queries) -> np.ndarray:
    arr = np.array([[q.x, q.y] for q in queries], dtype=np.float64).reshape(-1, 2)
    return np.ascontiguousarray(arr)


def _run(params, feats, qarr, *, want_vis, labels=None, weights=None,
         loss_weights: LossWeights | None = None, scale=0.0, frame_inits=None):
    n = qarr.shape[0]
    L = feats.shape[0]
    train = labels is not None
    if labels is None:
        labels = np.zeros((n, L, 2))
        weights = np.zeros((n, L))
    lw = loss_weights or LossWeights()
    points = np.zeros((n, L, 2))
    stack = np.zeros((n, L, ITERATIONS, 2))
    conf = np.ones((n, L))
    grads = [np.zeros(_SHAPES[k]) for k in ("W1", "b1", "W2", "b2")]
    use_inits = frame_inits is not None
    inits = np.ascontiguousarray(frame_inits if use_inits else np.zeros((n, L, 2)),
                                 dtype=np.float64)
    loss = _k.track(
        feats, qarr, params.W1, params.b1, params.W2, params.b2, ITERATIONS, STEP_CLAMP,
        want_vis, np.ascontiguousarray(labels, dtype=np.float64),
        np.ascontiguousarray(weights, dtype=np.float64), lw.discounts(), lw.huber_delta,
        scale, train, inits, use_inits, points, stack, conf, *grads,
    )
    grad = np.concatenate([g.ravel() for g in grads])
    return points, stack[:, 1:], conf, loss, grad


def nt_forward(params: NeuralTrackerParams, video: Video, window: Window, queries,
               feats: np.ndarray | None = None) -> ForwardResult:
    """Track ``queries`` (on the window's first frame) through the window."""
    if feats is None:
        feats = feature_stack(window_frames(video, window))
    qarr = _query_array(queries)
    points, stack, conf, _, _ = _run(params, feats, qarr, want_vis=True)
    trajs = []
    for i, q in enumerate(queries):
        vis = conf[i] > VISIBLE_PEAK
        vis[0] = True
        trajs.append(Trajectory(q, points[i], vis, confidence=conf[i]))
    return ForwardResult(trajs, stack, conf)


def chained_inits(params: NeuralTrackerParams, feats: np.ndarray, queries) -> np.ndarray:
    """Per-frame starting points of a chained forward pass, shape (N, L, 2)."""
    points, _ = track_points(params, feats, _query_array(queries), want_vis=False)
    inits = np.empty_like(points)
    inits[:, 0] = points[:, 0]
    inits[:, 1:] = points[:, :-1]
    return inits


def track_points(params: NeuralTrackerParams, feats: np.ndarray, qarr: np.ndarray,
                 want_vis: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Array-level forward pass: returns (N, L, 2) positions and (N, L) confidences."""
    points, _, conf, _, _ = _run(params, feats, np.ascontiguousarray(qarr, dtype=np.float64),
                                 want_vis=want_vis)
    return points, conf


def _label_arrays(pseudo_labels, weights: LossWeights):
    labels = np.stack([np.asarray(t.points, dtype=np.float64) for t in pseudo_labels])
    vis = np.stack([np.asarray(t.visible, dtype=bool) for t in pseudo_labels])
    w = np.where(vis, 1.0, weights.occluded_weight)
    return labels, w


def _huber(a: np.ndarray, delta: float) -> np.ndarray:
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def track_loss(prediction_stack: np.ndarray, pseudo_labels, weights: LossWeights) -> float:
    """Discounted, visibility-weighted Huber loss over refinement iterations.

    ``prediction_stack`` is (N, L-1, K, 2) for frames 1..L-1; the anchored
    first frame carries no loss. The result is averaged over query-frames.
    """
    stack = np.asarray(prediction_stack, dtype=np.float64)
    labels, w = _label_arrays(pseudo_labels, weights)
    if stack.ndim != 4 or stack.shape[-1] != 2:
        raise ValueError(f"prediction stack must be (N, L-1, K, 2), got {stack.shape}")
    n, lm1, K, _ = stack.shape
    if labels.shape != (n, lm1 + 1, 2):
        raise ValueError(
            f"labels of shape {labels.shape} do not match stack of shape {stack.shape}"
        )
    if n == 0 or lm1 == 0:
        return 0.0
    resid = np.linalg.norm(stack - labels[:, 1:, None, :], axis=-1)
    disc = weights.discounts(K)
    per = (_huber(resid, weights.huber_delta) * disc).sum(axis=-1) * w[:, 1:]
    return float(per.sum() / (n * lm1))


def nt_backward(params: NeuralTrackerParams, video: Video | None, window: Window | None,
                queries, pseudo_labels, weights: LossWeights,
                feats: np.ndarray | None = None,
                frame_inits: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the flat parameter vector.

    Gradients pass through all refinement iterations of a frame, including the
    correlation sampling, but the hand-off from one frame to the next is
    treated as a constant. ``frame_inits`` (N, L, 2) pins the starting point
    of every frame explicitly; by default each frame starts where the previous
    one ended.
    """
    if feats is None:
        feats = feature_stack(window_frames(video, window))
    qarr = _query_array(queries)
    labels, w = _label_arrays(pseudo_labels, weights)
    n, L = labels.shape[:2]
    if n != qarr.shape[0] or L != feats.shape[0]:
        raise ValueError("labels must align with queries and the window length")
    if n == 0 or L < 2:
        return 0.0, np.zeros(N_PARAMS)
    scale = 1.0 / (n * (L - 1))
    _, _, _, loss, grad = _run(params, feats, qarr, want_vis=False, labels=labels,
                               weights=w, loss_weights=weights, scale=scale,
                               frame_inits=frame_inits)
    if not np.all(np.isfinite(grad)) or not math.isfinite(loss):
        bad = _first_nonfinite(params, feats, qarr, labels, w, weights)
        raise PointDistillError(f"non-finite gradient at query {bad[0]}, frame {bad[1]}")
    return float(loss), grad


def _first_nonfinite(params, feats, qarr, labels, w, weights):
    for i in range(qarr.shape[0]):
        for t in range(2, feats.shape[0] + 1):
            _, _, _, loss, grad = _run(params, feats[:t], qarr[i:i + 1], want_vis=False,
                                       labels=labels[i:i + 1, :t], weights=w[i:i + 1, :t],
                                       loss_weights=weights, scale=1.0)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                return i, t - 1
    return -1, -1


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    size: int = N_PARAMS
    base_lr: float = 5e-5
    total_steps: int = 20000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)

    def lr(self, i: int | None = None) -> float:
        """Cosine schedule: base_lr at step 0, zero at total_steps."""
        i = self.step if i is None else i
        if self.total_steps <= 0:
            return self.base_lr
        frac = min(i, self.total_steps) / self.total_steps
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def adam_step(state: AdamState, params: NeuralTrackerParams, grad: np.ndarray) -> NeuralTrackerParams:
    """One bias-corrected Adam update at the scheduled learning rate (in place)."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.vector.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {params.vector.shape}")
    if not np.all(np.isfinite(grad)):
        raise PointDistillError(f"non-finite gradient at optimiser step {state.step}")
    lr = state.lr()
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    mhat = state.m / (1.0 - state.beta1 ** state.step)
    vhat = state.v / (1.0 - state.beta2 ** state.step)
    params.vector -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return params


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_FORMAT = "pointdistill-tracker"


def save_checkpoint(path, params: NeuralTrackerParams, *, step: int = 0, seed: int = 0,
                    extra: dict | None = None) -> None:
    """One JSON header line, then the parameters as little-endian float64."""
    header = {"format": CKPT_FORMAT, "version": 1, "arch": ARCH, "step": int(step),
              "seed": int(seed)}
    if extra:
        header["extra"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(params.vector.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[NeuralTrackerParams, dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise PointDistillError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    nl = raw.find(b"\n")
    if nl < 0:
        raise PointDistillError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PointDistillError(f"{path}: malformed checkpoint header") from exc
    if header.get("format") != CKPT_FORMAT:
        raise PointDistillError(f"{path}: not a tracker checkpoint")
    if header.get("arch") != ARCH:
        raise PointDistillError(f"{path}: architecture mismatch {header.get('arch')}")
    body = raw[nl + 1:]
    if len(body) != 8 * N_PARAMS:
        raise PointDistillError(f"{path}: expected {8 * N_PARAMS} parameter bytes, got {len(body)}")
    vec = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return NeuralTrackerParams(vec), header
