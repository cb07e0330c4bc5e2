"""Bark critical-band layout and per-band power spectra."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from .signal_io import N_BINS, POWER_FLOOR_DB, SAMPLE_RATE, Spectrogram, bin_frequencies

N_BANDS = 26
NYQUIST = SAMPLE_RATE / 2
# the Zwicker-Terhardt curve only reaches ~24.74 Bark at 22.05 kHz; the
# region above 24 Bark is split at 24.5 Bark so the layout has 26 bands
TOP_SPLIT_BARK = 24.5


def bark_of_freq(frequency_hz):
    f = np.asarray(frequency_hz, dtype=np.float64)
    if np.any(f < 0) or np.any(f > NYQUIST):
        raise ValueError(f"frequency outside [0, {NYQUIST}] Hz")
    z = 13.0 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0) ** 2)
    return z if z.ndim else float(z)


def band_index(frequency_hz):
    """1-based Bark band of a frequency (1..26)."""
    z = np.asarray(bark_of_freq(frequency_hz))
    idx = np.floor(z).astype(int) + 1
    idx = np.where(z >= 24.0, np.where(z >= TOP_SPLIT_BARK, 26, 25), idx)
    idx = np.minimum(idx, N_BANDS)
    return idx if idx.ndim else int(idx)


def _freq_of_bark(z):
    return brentq(lambda f: bark_of_freq(f) - z, 0.0, NYQUIST, xtol=1e-9)


@dataclass(frozen=True)
class BarkBands:
    count: int
    bin_to_band: np.ndarray  # 0-based band per STFT bin
    band_edges_hz: np.ndarray  # count + 1 monotone edges

    @property
    def centers_hz(self) -> np.ndarray:
        e = self.band_edges_hz
        return 0.5 * (e[:-1] + e[1:])

    def bins_of(self, band: int) -> np.ndarray:
        """Indices of STFT bins in 1-based ``band``."""
        return np.flatnonzero(self.bin_to_band == band - 1)

    @property
    def indicator(self) -> np.ndarray:
        """(N_BINS, count) 0/1 matrix mapping bins to bands."""
        m = np.zeros((len(self.bin_to_band), self.count))
        m[np.arange(len(self.bin_to_band)), self.bin_to_band] = 1.0
        return m


@lru_cache(maxsize=None)
def bark_bands(n_bins: int = N_BINS) -> BarkBands:
    cuts = [_freq_of_bark(z) for z in range(1, 25)] + [_freq_of_bark(TOP_SPLIT_BARK)]
    edges = np.array([0.0, *cuts, NYQUIST])
    b2b = np.asarray(band_index(bin_frequencies(n_bins))) - 1
    b2b.setflags(write=False)
    edges.setflags(write=False)
    return BarkBands(N_BANDS, b2b, edges)


@dataclass(frozen=True)
class BandPsd:
    linear: np.ndarray  # (n_frames, 26)

    @property
    def db(self) -> np.ndarray:
        return power_db(self.linear)


def power_db(linear):
    with np.errstate(divide="ignore"):
        return np.maximum(10 * np.log10(np.maximum(linear, 0.0)), POWER_FLOOR_DB)


def band_sum(power: np.ndarray, bands: BarkBands | None = None) -> np.ndarray:
    """Sum a (..., N_BINS) power array into (..., 26) bands."""
    bands = bands or bark_bands(power.shape[-1])
    return power @ bands.indicator


def band_psd(spec: Spectrogram | np.ndarray, scale: float = 1.0) -> BandPsd:
    """Per-band power sum_k |X(n,k)|^2, optionally multiplied by a calibration scale."""
    power = spec.power if isinstance(spec, Spectrogram) else np.asarray(spec)
    return BandPsd(band_sum(power) * scale)
