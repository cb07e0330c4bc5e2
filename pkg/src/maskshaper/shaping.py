"""From per-band gains to full-resolution filter responses.

Gains live on the 24 lowest Bark bands (bands 25 and 26 are never actuated).
Each band owns a pattern over the STFT bins: flat on the band itself,
raised-cosine ramps over its two neighbours, zero elsewhere. A frame's
response in dB is the gain-weighted sum of the patterns.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.signal import lfilter

from .bark import BarkBands, bark_bands
from .signal_io import HOP, WINDOW_LEN, Signal, Spectrogram, bin_frequencies, istft, stft

N_GAIN_BANDS = 24
GAIN_MIN_DB = -5.0
GAIN_MAX_DB = 10.0
DEFAULT_BETA = 0.8


def build_patterns(bands: BarkBands | None = None) -> np.ndarray:
    """(24, K) pattern bank sampled at the STFT bin frequencies."""
    bands = bands or bark_bands()
    f = bin_frequencies(len(bands.bin_to_band))
    edges = bands.band_edges_hz
    b = bands.bin_to_band  # 0-based
    w = np.zeros((N_GAIN_BANDS, len(f)))
    for nu in range(N_GAIN_BANDS):
        w[nu, b == nu] = 1.0
        if nu >= 1:
            lo, hi = edges[nu - 1], edges[nu]
            sel = b == nu - 1
            t = (f[sel] - lo) / (hi - lo)
            w[nu, sel] = 0.5 * (1 - np.cos(np.pi * t))
        if nu + 1 < bands.count:
            lo, hi = edges[nu + 1], edges[nu + 2]
            sel = b == nu + 1
            t = (f[sel] - lo) / (hi - lo)
            w[nu, sel] = 0.5 * (1 + np.cos(np.pi * t))
    w[0] *= 2.0
    return w


@lru_cache(maxsize=None)
def pattern_bank() -> np.ndarray:
    w = build_patterns()
    w.setflags(write=False)
    return w


def compose_response(gains_db: np.ndarray) -> np.ndarray:
    """Response in dB per bin: sum over bands of gain times pattern."""
    g = np.asarray(gains_db, dtype=np.float64)
    if g.shape[-1] != N_GAIN_BANDS:
        raise ValueError(f"expected {N_GAIN_BANDS} gains per frame, got {g.shape[-1]}")
    return g @ pattern_bank()


def smooth_gains(gains_db: np.ndarray, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Causal one-pole smoothing along frames, started at the first frame's value."""
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    g = np.asarray(gains_db, dtype=np.float64)
    if beta == 0.0 or g.shape[0] == 0:
        return g.copy()
    y, _ = lfilter([1 - beta], [1, -beta], g, axis=0, zi=beta * g[:1])
    return y


def smooth_gains_adjoint(grad: np.ndarray, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Transpose of :func:`smooth_gains` (a reverse-time scan), for backprop."""
    grad = np.asarray(grad, dtype=np.float64)
    if beta == 0.0 or grad.shape[0] == 0:
        return grad.copy()
    r = lfilter([1.0], [1, -beta], grad[::-1], axis=0)
    r = r[::-1]
    out = (1 - beta) * r
    out[0] = r[0]
    return out


def clamp_gains(gains_db: np.ndarray) -> np.ndarray:
    return np.clip(gains_db, GAIN_MIN_DB, GAIN_MAX_DB)


def finalize_gains(raw_db: np.ndarray, active: np.ndarray | None = None,
                   beta: float | None = DEFAULT_BETA) -> np.ndarray:
    """Smooth (if ``beta`` is not None), clamp, then zero the inactive bands.

    Masking comes last so smoothing cannot leak gain into inactive cells.
    """
    g = raw_db if beta is None else smooth_gains(raw_db, beta)
    g = clamp_gains(g)
    if active is not None:
        g = np.where(active, g, 0.0)
    return g


def apply_response(spec: Spectrogram, response_db: np.ndarray) -> Spectrogram:
    r = np.asarray(response_db)
    if r.shape != spec.frames.shape:
        raise ValueError(f"response shape {r.shape} does not match spectrogram {spec.frames.shape}")
    return spec.with_frames(spec.frames * 10 ** (r / 20))


def apply_gains(spec: Spectrogram, gains_db: np.ndarray) -> Spectrogram:
    return apply_response(spec, compose_response(gains_db))


def render(signal: Signal, gains_db: np.ndarray) -> Signal:
    """Filter ``signal`` by per-frame gains on the analysis grid and resynthesise.

    The analysis grid leaves the first and last samples under less than full
    window overlap (or none). Synthesis therefore runs on a zero-padded grid
    whose frames coincide with the analysis frames, the edge frames' gains
    carried outwards, so every output sample is fully reconstructed.
    """
    x = signal.samples
    g = np.asarray(gains_db, dtype=np.float64)
    lead = WINDOW_LEN // HOP
    padded = np.concatenate([np.zeros(WINDOW_LEN), x, np.zeros(2 * WINDOW_LEN)])
    spec = stft(padded)
    idx = np.clip(np.arange(spec.n_frames) - lead, 0, len(g) - 1)
    y = istft(apply_gains(spec, g[idx]), length=len(padded)).samples
    return Signal(y[WINDOW_LEN:WINDOW_LEN + len(x)], signal.sample_rate)


def gains_to_csv(gains_db: np.ndarray, path) -> None:
    g = np.asarray(gains_db)
    header = "frame," + ",".join(f"band{i}" for i in range(1, N_GAIN_BANDS + 1))
    rows = np.column_stack([np.arange(len(g)), g])
    np.savetxt(path, rows, delimiter=",", header=header, comments="",
               fmt=["%d"] + ["%.6f"] * N_GAIN_BANDS)


def gains_from_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != N_GAIN_BANDS + 1:
        raise ValueError(f"{path}: expected {N_GAIN_BANDS + 1} columns")
    return data[:, 1:]

