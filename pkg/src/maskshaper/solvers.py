"""Gain computation: the Estreder baseline rule and a constrained optimiser.

The optimiser works directly on the gain matrix of one excerpt. Its
objective is the masking loss (mean ReLU of noise level over processed
threshold) plus a multiplier-weighted power-deviation constraint; the
multiplier follows projected gradient ascent while the gains follow
projected gradient descent.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .bark import N_BANDS, band_psd, bark_bands, power_db
from .masking import _EPS_LOG, SFM_MIN_DB, MaskingModel, ThresholdMatrix, tonality
from .shaping import (
    DEFAULT_BETA, N_GAIN_BANDS, clamp_gains, compose_response, finalize_gains,
    pattern_bank, smooth_gains, smooth_gains_adjoint,
)
from .signal_io import (
    POWER_FLOOR_DB, Calibration, Spectrogram, a_weighting_power, frame_power_dba,
)

log = logging.getLogger(__name__)

LN10_10 = np.log(10) / 10
DB_PER_LN = 10 / np.log(10)


class SolverDiverged(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# scene preparation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NeedMask:
    need: np.ndarray    # (N, 26) noise above the initial threshold
    active: np.ndarray  # (N, 24) within reach of a needed band


def need_mask(noise_db, initial_threshold_db, reach_radius: int = 3) -> NeedMask:
    if reach_radius < 1:
        raise ValueError("reach_radius must be >= 1")
    need = np.asarray(noise_db) > np.asarray(initial_threshold_db)
    n_bands = need.shape[1]
    active = np.zeros((need.shape[0], N_GAIN_BANDS), dtype=bool)
    for mu in range(N_GAIN_BANDS):
        lo, hi = max(0, mu - reach_radius), min(n_bands, mu + reach_radius + 1)
        active[:, mu] = need[:, lo:hi].any(axis=1)
    return NeedMask(need, active)


@dataclass
class FrameBatch:
    """Everything the loss needs for a set of frames.

    ``music_power`` is raw |X|^2; ``scale`` turns bin sums into calibrated
    power so band/threshold levels are in dB SPL.
    """

    music_power: np.ndarray  # (n, K)
    noise_db: np.ndarray     # (n, 26)
    ref_dba: np.ndarray      # (n,) unprocessed frame level
    active: np.ndarray       # (n, 24)
    scale: float

    def __len__(self):
        return self.music_power.shape[0]

    @cached_property
    def log_power(self):
        """log |X|^2 over bins 1..K-1 (zero bins pinned at log(eps)) and their mask."""
        p = self.music_power[:, 1:]
        pos = p > 0
        return np.where(pos, np.log(np.where(pos, p, 1.0)), np.log(_EPS_LOG)), pos

    def subset(self, idx) -> "FrameBatch":
        return FrameBatch(self.music_power[idx], self.noise_db[idx], self.ref_dba[idx],
                          self.active[idx], self.scale)

    @staticmethod
    def concat(batches) -> "FrameBatch":
        batches = list(batches)
        return FrameBatch(
            np.concatenate([b.music_power for b in batches]),
            np.concatenate([b.noise_db for b in batches]),
            np.concatenate([b.ref_dba for b in batches]),
            np.concatenate([b.active for b in batches]),
            batches[0].scale,
        )


@dataclass
class Scene:
    """A music/noise pair analysed on the common frame grid."""

    music: Spectrogram
    noise: Spectrogram
    calibration: Calibration
    masking: MaskingModel
    noise_db: np.ndarray
    initial: ThresholdMatrix
    mask: NeedMask

    @property
    def n_frames(self):
        return self.music.n_frames

    @property
    def initial_db(self):
        return self.initial.db

    def frames(self) -> FrameBatch:
        return FrameBatch(self.music.power, self.noise_db,
                          frame_power_dba(self.music, self.calibration),
                          self.mask.active, self.calibration.power_scale)


def prepare_scene(music: Spectrogram, noise: Spectrogram, calibration: Calibration | None = None,
                  abs_floor: bool = True, reach_radius: int = 3) -> Scene:
    if music.frames.shape != noise.frames.shape:
        raise ValueError("music and noise spectrograms are not aligned")
    calibration = calibration or Calibration()
    model = MaskingModel(abs_floor)
    scale = calibration.power_scale
    noise_db = band_psd(noise, scale).db
    p = music.power
    initial = model.thresholds(band_psd(p, scale).linear, tonality(p).alpha)
    mask = need_mask(noise_db, initial.db, reach_radius)
    return Scene(music, noise, calibration, model, noise_db, initial, mask)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_l0(noise_db, processed_threshold_db) -> float:
    """Mean over all frames and bands of ReLU(noise - threshold), in dB."""
    gap = np.asarray(noise_db) - np.asarray(processed_threshold_db)
    return float(np.mean(np.maximum(gap, 0.0)))


def loss_power(original: Spectrogram, processed: Spectrogram,
               calibration: Calibration | None = None) -> float:
    """Mean absolute per-frame change of A-weighted level (dBA)."""
    if original.n_frames != processed.n_frames:
        raise ValueError("frame count mismatch")
    d = frame_power_dba(processed, calibration) - frame_power_dba(original, calibration)
    return float(np.mean(np.abs(d)))


def total_loss(l0, l_power, lam, delta_p_max) -> float:
    if lam < 0:
        raise ValueError("multiplier must be nonnegative")
    if delta_p_max is None:
        return float(l0)
    return float(l0 - lam * (delta_p_max - l_power))


def update_lambda(lam, l_power, delta_p_max, lambda_rate=1e-3) -> float:
    """Projected ascent step on the multiplier (kept >= 0)."""
    return max(0.0, lam + lambda_rate * (l_power - delta_p_max))


@dataclass
class LossEval:
    l0: float
    l_power: float
    total: float
    grad: np.ndarray | None  # d total / d gains, (n, 24)
    threshold_db: np.ndarray
    processed_dba: np.ndarray


def evaluate_loss(gains_db: np.ndarray, batch: FrameBatch, masking: MaskingModel,
                  lam: float = 0.0, delta_p_max: float | None = None,
                  with_grad: bool = True) -> LossEval:
    """Masking + power losses of ``gains_db`` applied to ``batch`` and their gradient.

    The gradient is exact almost everywhere, including the dependence of the
    tonality coefficient on the filtered spectrum.
    """
    n = len(batch)
    w = pattern_bank()
    r = gains_db @ w
    ph = batch.music_power * np.exp(LN10_10 * r)

    bands = bark_bands()
    b_hat = (ph @ bands.indicator) * batch.scale
    # tonality of the filtered frame without another log: log p_hat = log p + c * r
    logp, pos = batch.log_power
    log_gm = (logp + LN10_10 * r[:, 1:] * pos).mean(axis=1)
    am = ph[:, 1:].mean(axis=1)
    with np.errstate(divide="ignore"):
        sfm = np.where(am > 0, DB_PER_LN * (log_gm - np.log(np.where(am > 0, am, 1.0))), 0.0)
    alpha = np.minimum(np.minimum(sfm, 0.0) / SFM_MIN_DB, 1.0)
    thr = masking.thresholds(b_hat, alpha)
    t_db = thr.db
    gap = batch.noise_db - t_db
    l0 = float(np.mean(np.maximum(gap, 0.0)))

    wa = a_weighting_power(ph.shape[1])
    pa = ph @ wa * batch.scale
    with np.errstate(divide="ignore"):
        dba = np.maximum(10 * np.log10(pa), POWER_FLOOR_DB)
    diff = dba - batch.ref_dba
    l_power = float(np.mean(np.abs(diff)))
    constrained = delta_p_max is not None
    total = l0 - lam * (delta_p_max - l_power) if constrained else l0

    if not with_grad:
        return LossEval(l0, l_power, total, None, t_db, dba)

    # d L0 / d T_linear
    d_tdb = -(gap > 0).astype(float) / (n * N_BANDS)
    live = t_db > POWER_FLOOR_DB
    d_t = np.where(live, d_tdb * DB_PER_LN / np.where(live, thr.linear, 1.0), 0.0)

    d_b = masking.vjp_bands(d_t, thr, alpha)           # (n, 26)
    # d total / d r_k = ph_k * coef_k (+ a per-bin constant from the SFM's log term)
    coef = (LN10_10 * batch.scale) * d_b[:, bands.bin_to_band]

    # tonality path: alpha = -SFM/60 while unsaturated
    d_alpha = np.sum(d_t * masking.dthreshold_dalpha(thr), axis=1)
    am_sum = am * (ph.shape[1] - 1)
    unsat = (alpha < 1.0) & (am_sum > 0)
    c_alpha = None
    if np.any(unsat):
        c_alpha = np.where(unsat, d_alpha / SFM_MIN_DB, 0.0)
        coef[:, 1:] -= (c_alpha / np.where(am_sum > 0, am_sum, 1.0))[:, None]

    if constrained and lam > 0:
        on = pa > 10 ** (POWER_FLOOR_DB / 10)
        row = lam * np.sign(diff) * on * batch.scale / (n * np.where(on, pa, 1.0))
        coef += row[:, None] * wa[None, :]

    d_r = ph * coef
    if c_alpha is not None:
        d_r[:, 1:] += (c_alpha / (ph.shape[1] - 1))[:, None] * pos
    grad = d_r @ w.T
    return LossEval(l0, l_power, total, grad, t_db, dba)


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def estreder_gains(noise_db, threshold_db) -> np.ndarray:
    """Per-band boost equal to the unmasked noise excess, clamped."""
    g = np.maximum(np.asarray(noise_db) - np.asarray(threshold_db), 0.0)[:, :N_GAIN_BANDS]
    return clamp_gains(g)


def baseline_gains(scene: Scene, beta: float | None = DEFAULT_BETA) -> np.ndarray:
    raw = estreder_gains(scene.noise_db, scene.initial_db)
    return finalize_gains(raw, scene.mask.active, beta)


# ---------------------------------------------------------------------------
# constrained optimiser
# ---------------------------------------------------------------------------

@dataclass
class SolverConfig:
    delta_p_max: float | None = None
    step_size: float = 0.5
    lambda_rate: float = 1e-3
    max_iters: int = 2000
    tolerance: float = 1e-3
    patience: int = 30
    reach_radius: int = 3
    smoothing_in_loop: bool = False
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if self.step_size <= 0 or self.lambda_rate <= 0:
            raise ValueError("step_size and lambda_rate must be positive")
        if self.reach_radius < 1:
            raise ValueError("reach_radius must be >= 1")


@dataclass
class TraceRow:
    iteration: int
    l0: float
    l_power: float
    lam: float
    total: float
    max_change: float


@dataclass
class SolverTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iteration", "l0", "l_power", "lambda", "total", "max_change"])
            for r in self.rows:
                wr.writerow([r.iteration, f"{r.l0:.9g}", f"{r.l_power:.9g}", f"{r.lam:.9g}",
                             f"{r.total:.9g}", f"{r.max_change:.9g}"])


def _effective(theta, active, cfg: SolverConfig):
    g = smooth_gains(theta, cfg.beta) if cfg.smoothing_in_loop else theta
    return np.where(active, g, 0.0)


def solve_gains(scene: Scene, config: SolverConfig | None = None):
    """Optimise the gain matrix of one scene; returns ``(gains, trace)``.

    Frames without any active band keep zero gains, so (unless smoothing
    runs inside the loop and couples frames) only the active frames are
    iterated; the trace always reports whole-scene losses.
    """
    cfg = config or SolverConfig()
    full = scene.frames()
    active = scene.mask.active
    n = len(full)
    gains = np.zeros((n, N_GAIN_BANDS))
    trace = SolverTrace()

    if not active.any():
        ev = evaluate_loss(gains, full, scene.masking, with_grad=False)
        trace.rows.append(TraceRow(0, ev.l0, ev.l_power, 0.0, ev.l0, 0.0))
        return gains, trace

    if cfg.smoothing_in_loop:
        rows = np.arange(n)
    else:
        rows = np.flatnonzero(active.any(axis=1))
    batch = full.subset(rows)
    act = active[rows]
    na = len(rows)
    # whole-scene L0 = (sum over iterated frames + constant remainder) / (n * 26)
    rest = np.setdiff1d(np.arange(n), rows)
    l0_rest = 0.0
    if len(rest):
        ev_rest = evaluate_loss(np.zeros((len(rest), N_GAIN_BANDS)), full.subset(rest),
                                scene.masking, with_grad=False)
        l0_rest = ev_rest.l0 * len(rest) / n

    def scene_losses(ev, lam):
        l0 = ev.l0 * na / n + l0_rest
        lp = ev.l_power * na / n
        return l0, lp, total_loss(l0, lp, lam, cfg.delta_p_max)

    constrained = cfg.delta_p_max is not None
    theta = np.zeros((na, N_GAIN_BANDS))
    lam = 0.0
    # the losses are means over frames and bands: undo that per entry
    norm = na * N_BANDS
    # per-entry step sizes: halved (with a half-step backtrack) whenever an
    # entry's gradient flips sign or vanishes, i.e. it stepped over a kink
    eta = np.full_like(theta, cfg.step_size)
    prev_grad = np.zeros_like(theta)
    prev_delta = np.zeros_like(theta)
    best_merit, best_it = np.inf, 0
    for it in range(cfg.max_iters):
        g = _effective(theta, act, cfg)
        ev = evaluate_loss(g, batch, scene.masking, lam, cfg.delta_p_max)
        if not (np.isfinite(ev.total) and np.all(np.isfinite(ev.grad))):
            raise SolverDiverged(f"non-finite loss at iteration {it}", trace)
        l0, lp, tot = scene_losses(ev, lam)
        grad = np.where(act, ev.grad, 0.0)
        if cfg.smoothing_in_loop:
            grad = smooth_gains_adjoint(grad, cfg.beta)
        grad = grad * norm
        crossed = (prev_grad * grad < 0) | ((prev_grad != 0) & (np.abs(grad) < 1e-12))
        eta = np.where(crossed, 0.5 * eta, np.minimum(1.2 * eta, cfg.step_size))
        delta = np.where(crossed, -0.5 * prev_delta, -eta * grad)
        new = np.where(act, clamp_gains(theta + delta), 0.0)
        change = float(np.max(np.abs(new - theta)))
        trace.rows.append(TraceRow(it, l0, lp, lam, tot, change))
        prev_delta = new - theta
        prev_grad = np.where(crossed, 0.0, grad)
        theta = new
        if constrained:
            lam = update_lambda(lam, lp, cfg.delta_p_max, cfg.lambda_rate)
        feasible = not constrained or lp <= cfg.delta_p_max
        # stall test: masking loss plus constraint violation stopped improving
        merit = l0 + (max(0.0, lp - cfg.delta_p_max) if constrained else 0.0)
        if merit < best_merit - 1e-4:
            best_merit, best_it = merit, it
        if feasible and (change < cfg.tolerance or it - best_it >= cfg.patience):
            break

    gains[rows] = _effective(theta, act, cfg)
    ev = evaluate_loss(gains[rows], batch, scene.masking, lam, cfg.delta_p_max, with_grad=False)
    l0, lp, tot = scene_losses(ev, lam)
    trace.rows.append(TraceRow(len(trace.rows), l0, lp, lam, tot, 0.0))
    return gains, trace


def processed_thresholds(scene: Scene, gains_db: np.ndarray) -> ThresholdMatrix:
    ph = scene.music.power * 10 ** (compose_response(gains_db) / 10)
    return scene.masking.thresholds(band_psd(ph, scene.calibration.power_scale).linear,
                                    tonality(ph).alpha)


