"""A small per-frame gain predictor trained on the constrained masking loss.

The network maps 78 normalised Bark features (music level, noise level and
music masking threshold, 26 bands each) to 24 gains in dB. Training reuses
the solver's loss and gradient; the multiplier is one global scalar updated
after every minibatch.
"""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bark import band_psd
from .shaping import DEFAULT_BETA, GAIN_MAX_DB, GAIN_MIN_DB, N_GAIN_BANDS, finalize_gains
from .solvers import FrameBatch, Scene, evaluate_loss, update_lambda

log = logging.getLogger(__name__)

DEFAULT_DIMS = (78, 64, 64, 24)
FEATURE_CENTER_DB = 60.0
FEATURE_SCALE_DB = 40.0
MODEL_MAGIC = b"DPNM"
MODEL_VERSION = 1
DIVERGENCE_LIMIT = 1e6


class ModelFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, log_=None):
        super().__init__(message)
        self.log = log_


@dataclass
class PredictorModel:
    layer_dims: tuple
    weights: list  # weights[i]: (dims[i], dims[i+1])
    biases: list
    seed: int = 0
    feature_center: float = FEATURE_CENTER_DB
    feature_scale: float = FEATURE_SCALE_DB

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if self.layer_dims[-1] != N_GAIN_BANDS:
            raise ValueError(f"output dimension must be {N_GAIN_BANDS}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != self.layer_dims[i:i + 2] or b.shape != (self.layer_dims[i + 1],):
                raise ValueError(f"layer {i} parameter shapes do not match layer_dims")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("model parameters must be finite")

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def copy(self) -> "PredictorModel":
        return PredictorModel(self.layer_dims, [w.copy() for w in self.weights],
                              [b.copy() for b in self.biases], self.seed,
                              self.feature_center, self.feature_scale)


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 64
    lambda_rate: float = 1e-3
    delta_p_max: float | None = None
    seed: int = 0
    optimizer: str = "sgd"
    layer_dims: tuple = DEFAULT_DIMS

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0 or self.lambda_rate <= 0:
            raise ValueError("learning_rate and lambda_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if len(self.layer_dims) < 2 or self.layer_dims[-1] != N_GAIN_BANDS:
            raise ValueError(f"layer_dims must end in {N_GAIN_BANDS} outputs")


def init_model(config: TrainConfig | None = None, seed: int | None = None) -> PredictorModel:
    """Fan-in scaled uniform weights, zero biases, drawn from ``seed``."""
    config = config or TrainConfig()
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    dims = tuple(config.layer_dims)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return PredictorModel(dims, weights, biases, seed)


# ---------------------------------------------------------------------------
# features and inference
# ---------------------------------------------------------------------------

def features(music_db, noise_db, threshold_db, center=FEATURE_CENTER_DB,
             scale=FEATURE_SCALE_DB) -> np.ndarray:
    x = np.concatenate([np.atleast_2d(music_db), np.atleast_2d(noise_db),
                        np.atleast_2d(threshold_db)], axis=1)
    return (x - center) / scale


def scene_features(scene: Scene, model: PredictorModel | None = None) -> np.ndarray:
    c = model.feature_center if model else FEATURE_CENTER_DB
    s = model.feature_scale if model else FEATURE_SCALE_DB
    music_db = band_psd(scene.music, scene.calibration.power_scale).db
    return features(music_db, scene.noise_db, scene.initial_db, c, s)


def _forward(model: PredictorModel, x):
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def forward(model: PredictorModel, feature_frames) -> np.ndarray:
    """Raw network output (n, 24): before masking, smoothing and clamping."""
    x = np.atleast_2d(np.asarray(feature_frames, dtype=np.float64))
    if x.shape[1] != model.layer_dims[0]:
        raise ValueError(f"expected {model.layer_dims[0]} features, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    return _forward(model, x)[-1]


def predict_gains(model: PredictorModel, scene: Scene, beta: float | None = DEFAULT_BETA):
    raw = forward(model, scene_features(scene, model))
    return finalize_gains(raw, scene.mask.active, beta)


def _backward(model, acts, d_out):
    """Parameter gradients given dL/d(output); returns [dW0, db0, dW1, ...]."""
    grads = [None] * (2 * len(model.weights))
    d = d_out
    for i in range(len(model.weights) - 1, -1, -1):
        grads[2 * i] = acts[i].T @ d
        grads[2 * i + 1] = d.sum(axis=0)
        if i:
            d = (d @ model.weights[i].T) * (acts[i] > 0)
    return grads


def _train_gains(raw, active):
    # training-time pipeline: clamp and mask (no smoothing across shuffled frames)
    inside = (raw > GAIN_MIN_DB) & (raw < GAIN_MAX_DB)
    g = np.where(active, np.clip(raw, GAIN_MIN_DB, GAIN_MAX_DB), 0.0)
    return g, active & inside


def batch_loss(model: PredictorModel, x, batch: FrameBatch, masking, lam=0.0,
               delta_p_max=None, with_grad=True):
    """Constrained loss of the model on a frame batch and its parameter gradients."""
    acts = _forward(model, x)
    g, pass_through = _train_gains(acts[-1], batch.active)
    ev = evaluate_loss(g, batch, masking, lam, delta_p_max, with_grad=with_grad)
    if not with_grad:
        return ev, None
    grads = _backward(model, acts, np.where(pass_through, ev.grad, 0.0))
    return ev, grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainingSet:
    x: np.ndarray       # (n, 78)
    batch: FrameBatch
    masking: object

    def __len__(self):
        return self.x.shape[0]


def build_training_set(scenes, frames_per_scene: int | None = None, seed: int = 0) -> TrainingSet:
    """Stack scene frames; optionally keep a seeded random subset per scene."""
    rng = np.random.default_rng(seed)
    xs, bs = [], []
    masking = None
    for sc in scenes:
        x = scene_features(sc)
        b = sc.frames()
        if frames_per_scene is not None and len(b) > frames_per_scene:
            idx = np.sort(rng.choice(len(b), frames_per_scene, replace=False))
            x, b = x[idx], b.subset(idx)
        xs.append(x)
        bs.append(b)
        masking = masking or sc.masking
    if not xs:
        raise ValueError("no scenes to train on")
    return TrainingSet(np.concatenate(xs), FrameBatch.concat(bs), masking)


@dataclass
class BatchRecord:
    epoch: int
    l0: float
    l_power: float
    lam: float  # multiplier used for this batch


@dataclass
class EpochRecord:
    epoch: int
    l0: float
    l_power: float
    lam: float  # multiplier at the end of the epoch
    total: float


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    batches: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", "l0", "l_power", "lambda", "total"])
            for r in self.epochs:
                wr.writerow([r.epoch, f"{r.l0:.9g}", f"{r.l_power:.9g}", f"{r.lam:.9g}",
                             f"{r.total:.9g}"])


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(model: PredictorModel, data: TrainingSet, config: TrainConfig | None = None):
    """Minibatch descent on the constrained loss; returns ``(model, log)``.

    The input model is not modified. Batches are drawn by a seeded shuffle
    each epoch, so the run is a pure function of (model, data, config).
    """
    cfg = config or TrainConfig()
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    params = model.params()
    opt = _Adam(params, cfg.learning_rate) if cfg.optimizer == "adam" else None
    lam = 0.0
    tlog = TrainingLog()
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        count = 0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            ev, grads = batch_loss(model, data.x[idx], data.batch.subset(idx), data.masking,
                                   lam, cfg.delta_p_max)
            if not np.isfinite(ev.total) or abs(ev.total) > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"loss {ev.total} at epoch {epoch}", tlog)
            tlog.batches.append(BatchRecord(epoch, ev.l0, ev.l_power, lam))
            if opt is None:
                for p, g in zip(params, grads):
                    p -= cfg.learning_rate * g
            else:
                opt.step(params, grads)
            if cfg.delta_p_max is not None:
                lam = update_lambda(lam, ev.l_power, cfg.delta_p_max, cfg.lambda_rate)
            w = len(idx)
            sums += w * np.array([ev.l0, ev.l_power, ev.total])
            count += w
        l0, lp, tot = sums / count
        tlog.epochs.append(EpochRecord(epoch, l0, lp, lam, tot))
        log.info("epoch %d: L0 %.4f  L_power %.4f  lambda %.5f", epoch, l0, lp, lam)
        if not all(np.all(np.isfinite(p)) for p in params):
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}", tlog)
    return model, tlog


# ---------------------------------------------------------------------------
# model file
# ---------------------------------------------------------------------------
# layout (little-endian): magic, u32 version, u32 n_dims, n_dims * u32 dims,
# i64 seed, f64 feature center, f64 feature scale, then per layer W (row-major)
# followed by b, all float64.

_HEAD = struct.Struct("<4sII")


def save_model(model: PredictorModel, path) -> None:
    parts = [_HEAD.pack(MODEL_MAGIC, MODEL_VERSION, len(model.layer_dims)),
             struct.pack(f"<{len(model.layer_dims)}I", *model.layer_dims),
             struct.pack("<qdd", model.seed, model.feature_center, model.feature_scale)]
    for p in model.params():
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path) -> PredictorModel:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise ModelFormatError(f"{path}: file too short for a model header")
    magic, version, n_dims = _HEAD.unpack_from(raw, 0)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: model version {version}, expected {MODEL_VERSION}")
    off = _HEAD.size
    meta = struct.Struct(f"<{n_dims}Iqdd")
    if n_dims < 2 or len(raw) < off + meta.size:
        raise ModelFormatError(f"{path}: truncated header")
    *dims, seed, center, scale = meta.unpack_from(raw, off)
    off += meta.size
    n_params = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    if len(raw) != off + 8 * n_params:
        raise ModelFormatError(f"{path}: expected {n_params} parameters, "
                               f"file holds {(len(raw) - off) / 8:g}")
    flat = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(flat[:a * b].reshape(a, b).copy())
        flat = flat[a * b:]
        biases.append(flat[:b].copy())
        flat = flat[b:]
    return PredictorModel(tuple(dims), weights, biases, seed, center, scale)
