"""Johnston-style simultaneous masking thresholds on Bark bands.

Per frame: spread the band powers with a fixed inter-band spreading matrix,
lower them by a tonality-dependent offset, renormalise by the spreading
energy and (optionally) floor at the absolute threshold of hearing.
Everything is vectorised over frames: band powers are ``(n_frames, 26)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .bark import N_BANDS, bark_bands, power_db

SFM_MIN_DB = -60.0
NOISE_OFFSET_DB = 5.5
TONE_OFFSET_BASE_DB = 14.5
_EPS_LOG = 1e-300


def spreading_db(delta_bark):
    """Spreading function in dB for masker-to-maskee distance ``delta_bark``."""
    d = np.asarray(delta_bark, dtype=np.float64) + 0.474
    out = 15.81 + 7.5 * d - 17.5 * np.sqrt(1.0 + d * d)
    return out if out.ndim else float(out)


@lru_cache(maxsize=None)
def spreading_matrix(n_bands: int = N_BANDS) -> np.ndarray:
    """s[nu, mu]: linear gain with which band mu's power spreads into band nu."""
    idx = np.arange(n_bands)
    s = 10 ** (spreading_db(idx[:, None] - idx[None, :]) / 10)
    s.setflags(write=False)
    return s


def absolute_threshold_db(frequency_hz):
    """Threshold in quiet (dB SPL), Terhardt's approximation."""
    f = np.maximum(np.asarray(frequency_hz, dtype=np.float64), 20.0) / 1000.0
    return 3.64 * f ** -0.8 - 6.5 * np.exp(-0.6 * (f - 3.3) ** 2) + 1e-3 * f ** 4


@dataclass(frozen=True)
class TonalityEstimate:
    sfm_db: np.ndarray
    alpha: np.ndarray


@dataclass(frozen=True)
class ThresholdMatrix:
    linear: np.ndarray
    floor_active: np.ndarray  # True where the hearing threshold set the value

    @property
    def db(self) -> np.ndarray:
        return power_db(self.linear)


def tonality(power_frames) -> TonalityEstimate:
    """Spectral flatness (dB) over bins 1..K-1 and the tonality coefficient.

    Accepts one power spectrum or a ``(n_frames, K)`` stack. All-zero frames
    are treated as noise-like (alpha = 0).
    """
    p = np.atleast_2d(np.asarray(power_frames, dtype=np.float64))[:, 1:]
    if np.any(p < 0):
        raise ValueError("power spectrum must be nonnegative")
    am = p.mean(axis=1)
    log_gm = np.log(p + _EPS_LOG).mean(axis=1)
    silent = am <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        sfm = np.where(silent, 0.0, 10 / np.log(10) * (log_gm - np.log(np.where(silent, 1.0, am))))
    sfm = np.minimum(sfm, 0.0)
    alpha = np.minimum(sfm / SFM_MIN_DB, 1.0)
    if np.ndim(power_frames) == 1:
        return TonalityEstimate(sfm[0], alpha[0])
    return TonalityEstimate(sfm, alpha)


def offset_db(alpha) -> np.ndarray:
    """(n_frames, 26) masking offset; band numbers are 1-based."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))[:, None]
    nu = np.arange(1, N_BANDS + 1)[None, :]
    return alpha * (TONE_OFFSET_BASE_DB + nu) + (1 - alpha) * NOISE_OFFSET_DB


@lru_cache(maxsize=None)
def _quiet_linear() -> np.ndarray:
    # calibrated band powers are already in dB SPL units, so no rescaling here
    return 10 ** (absolute_threshold_db(bark_bands().centers_hz) / 10)


class MaskingModel:
    """Precomputed spreading/renormalisation constants plus the floor switch."""

    def __init__(self, abs_floor: bool = True):
        self.abs_floor = abs_floor
        self.s = spreading_matrix()
        self.k = self.s.sum(axis=1)
        self.quiet = _quiet_linear()

    def _gain(self, alpha):
        # per-(frame, band) factor 10^(-O/10) / K
        return 10 ** (-offset_db(alpha) / 10) / self.k[None, :]

    def thresholds(self, band_linear, alpha) -> ThresholdMatrix:
        b = np.atleast_2d(band_linear)
        spread = b @ self.s.T
        raw = spread * self._gain(alpha)
        if self.abs_floor:
            floor_active = raw < self.quiet[None, :]
            t = np.where(floor_active, self.quiet[None, :], raw)
        else:
            floor_active = np.zeros_like(raw, dtype=bool)
            t = raw
        return ThresholdMatrix(t, floor_active)

    def jacobian(self, band_linear_frame, alpha) -> np.ndarray:
        """dT_linear[nu] / dB[mu] for one frame, alpha held fixed."""
        b = np.asarray(band_linear_frame, dtype=np.float64)
        g = self._gain(alpha)[0]
        jac = self.s * g[:, None]
        if self.abs_floor:
            fa = self.thresholds(b, alpha).floor_active[0]
            jac[fa, :] = 0.0
        return jac

    def vjp_bands(self, dl_dt, thr: ThresholdMatrix, alpha) -> np.ndarray:
        """Pull a (n_frames, 26) gradient w.r.t. thresholds back to band powers."""
        c = np.where(thr.floor_active, 0.0, dl_dt * self._gain(alpha))
        return c @ self.s

    def dthreshold_dalpha(self, thr: ThresholdMatrix) -> np.ndarray:
        """dT_linear / d alpha per (frame, band) (zero where floored)."""
        nu = np.arange(1, N_BANDS + 1)[None, :]
        slope = TONE_OFFSET_BASE_DB + nu - NOISE_OFFSET_DB
        d = -thr.linear * np.log(10) / 10 * slope
        return np.where(thr.floor_active, 0.0, d)


def masking_thresholds(band_linear, alpha, abs_floor: bool = True) -> ThresholdMatrix:
    """Thresholds for calibrated band powers (dB SPL units when in dB)."""
    return MaskingModel(abs_floor).thresholds(band_linear, alpha)


def threshold_jacobian(band_linear_frame, alpha, abs_floor: bool = True) -> np.ndarray:
    return MaskingModel(abs_floor).jacobian(band_linear_frame, alpha)
