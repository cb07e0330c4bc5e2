"""WAV I/O, STFT analysis/synthesis and A-weighted frame levels.

All spectral processing in the package runs on one fixed frame grid:
periodic Hann window of 2048 samples, hop 512 (75 % overlap), 44.1 kHz,
no centering or padding (frame 0 starts at sample 0).
"""
from __future__ import annotations

import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

log = logging.getLogger(__name__)

SAMPLE_RATE = 44100
WINDOW_LEN = 2048
HOP = 512
N_BINS = WINDOW_LEN // 2 + 1

POWER_FLOOR_DB = -120.0
A_WEIGHT_FLOOR_DB = -200.0
DEFAULT_SPL_AT_FULLSCALE = 100.0


class UnsupportedRateError(ValueError):
    pass


class WavFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Signal:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("Signal samples must be one-dimensional")
        if not np.all(np.isfinite(x)):
            raise ValueError("Signal contains non-finite samples")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    """Complex one-sided STFT frames, shape (n_frames, N_BINS)."""

    frames: np.ndarray
    window_len: int = WINDOW_LEN
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE
    n_samples: int | None = None

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def power(self) -> np.ndarray:
        return self.frames.real ** 2 + self.frames.imag ** 2

    def with_frames(self, frames: np.ndarray) -> "Spectrogram":
        if frames.shape != self.frames.shape:
            raise ValueError(f"frame shape {frames.shape} != {self.frames.shape}")
        return Spectrogram(frames, self.window_len, self.hop, self.sample_rate, self.n_samples)


@dataclass
class WriteResult:
    path: Path
    bit_depth: str
    warnings: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class Calibration:
    """Digital-to-SPL mapping: a full-scale sine reads ``spl_at_fullscale`` dB."""

    spl_at_fullscale: float = DEFAULT_SPL_AT_FULLSCALE

    @property
    def power_scale(self) -> float:
        """Factor turning a bin sum of |X|^2 into calibrated (SPL-referenced) power."""
        w = hann_window()
        # mean-square of the windowed frame, referenced to a full-scale sine (0.5)
        return 2.0 / (WINDOW_LEN * np.sum(w ** 2)) / 0.5 * 10 ** (self.spl_at_fullscale / 10)

    @property
    def offset_db(self) -> float:
        return 10 * np.log10(self.power_scale)


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------

def read_wav(path) -> Signal:
    """Read a PCM16/PCM24/float32 WAV file as a mono 44.1 kHz signal.

    Multichannel files are downmixed by averaging channels. There is no
    resampler: any other rate raises :class:`UnsupportedRateError`.
    """
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy raises ValueError / struct.error on bad headers
        raise WavFormatError(f"cannot parse WAV file {path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise UnsupportedRateError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz")

    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return Signal(x, rate)


def write_wav(signal: Signal, path, bit_depth="float32") -> WriteResult:
    """Write a mono WAV file; ``bit_depth`` is 16, 24 or "float32".

    Integer formats clip to full scale; any sample beyond +-1.0 is reported in
    the returned warnings (float32 keeps the values unclipped).
    """
    path = Path(path)
    x = np.asarray(signal.samples, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot write non-finite samples")
    bit_depth = str(bit_depth)
    result = WriteResult(path, bit_depth)
    n_over = int(np.count_nonzero(np.abs(x) > 1.0))

    if bit_depth == "float32":
        if n_over:
            result.warnings.append(f"{n_over} samples exceed full scale (kept unclipped in float32)")
        wavfile.write(str(path), signal.sample_rate, x.astype(np.float32))
    elif bit_depth in ("16", "24"):
        if n_over:
            result.warnings.append(f"{n_over} samples clipped to full scale")
        bits = int(bit_depth)
        full = 2 ** (bits - 1)
        q = np.clip(np.round(x * full), -full, full - 1).astype(np.int32)
        if bits == 16:
            raw = q.astype("<i2").tobytes()
        else:
            b = q.astype("<i4").view(np.uint8).reshape(-1, 4)[:, :3]
            raw = b.tobytes()
        with wave.open(str(path), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(bits // 8)
            w.setframerate(signal.sample_rate)
            w.writeframes(raw)
    else:
        raise ValueError(f"unsupported bit depth {bit_depth!r}")
    for msg in result.warnings:
        log.warning("%s: %s", path, msg)
    return result


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------

def hann_window(n: int = WINDOW_LEN) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def bin_frequencies(n_bins: int = N_BINS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return np.arange(n_bins) * sample_rate / (2 * (n_bins - 1))


def n_frames_for(n_samples: int) -> int:
    if n_samples < WINDOW_LEN:
        raise ValueError(f"signal of {n_samples} samples is shorter than one window ({WINDOW_LEN})")
    return (n_samples - WINDOW_LEN) // HOP + 1


def stft(signal: Signal | np.ndarray) -> Spectrogram:
    x = signal.samples if isinstance(signal, Signal) else np.asarray(signal, dtype=np.float64)
    n = n_frames_for(len(x))
    frames = np.lib.stride_tricks.sliding_window_view(x, WINDOW_LEN)[::HOP][:n]
    X = np.fft.rfft(frames * hann_window(), axis=1)
    return Spectrogram(X, n_samples=len(x))


def istft(spec: Spectrogram, length: int | None = None) -> Signal:
    """Weighted overlap-add synthesis (dual window w / sum w^2).

    Samples not covered by any window (sample 0, and the tail past the last
    frame) come out as zeros. ``length`` defaults to the analysed length.
    """
    n = spec.n_frames
    w = hann_window(spec.window_len)
    out_len = (n - 1) * spec.hop + spec.window_len
    frames = np.fft.irfft(spec.frames, n=spec.window_len, axis=1) * w
    y = np.zeros(out_len)
    norm = np.zeros(out_len)
    for i in range(n):
        sl = slice(i * spec.hop, i * spec.hop + spec.window_len)
        y[sl] += frames[i]
        norm[sl] += w ** 2
    covered = norm > 1e-10
    y[covered] /= norm[covered]
    y[~covered] = 0.0
    if length is None:
        length = spec.n_samples if spec.n_samples is not None else out_len
    if length > out_len:
        y = np.concatenate([y, np.zeros(length - out_len)])
    return Signal(y[:length], spec.sample_rate)


def windowed_frame_power(x: np.ndarray) -> np.ndarray:
    """Time-domain energy of each Hann-windowed analysis frame."""
    n = n_frames_for(len(x))
    frames = np.lib.stride_tricks.sliding_window_view(np.asarray(x, float), WINDOW_LEN)[::HOP][:n]
    return np.sum((frames * hann_window()) ** 2, axis=1)


def spectral_frame_power(spec: Spectrogram) -> np.ndarray:
    """Parseval-consistent frame energy from a one-sided spectrum."""
    p = spec.power
    L = spec.window_len
    return (p[:, 0] + p[:, -1] + 2 * p[:, 1:-1].sum(axis=1)) / L


# ---------------------------------------------------------------------------
# A-weighting and frame levels
# ---------------------------------------------------------------------------

def _ra(f):
    f2 = np.asarray(f, dtype=np.float64) ** 2
    return (12194.0 ** 2 * f2 ** 2) / (
        (f2 + 20.6 ** 2) * np.sqrt((f2 + 107.7 ** 2) * (f2 + 737.9 ** 2)) * (f2 + 12194.0 ** 2)
    )


_RA_1K_DB = 20 * np.log10(_ra(1000.0))


def a_weighting_db(frequency_hz):
    """A-weighting in dB, normalised to exactly 0 dB at 1 kHz (floor -200 dB at DC)."""
    f = np.asarray(frequency_hz, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be nonnegative")
    with np.errstate(divide="ignore"):
        db = 20 * np.log10(_ra(f)) - _RA_1K_DB
    db = np.maximum(db, A_WEIGHT_FLOOR_DB)
    return db if db.ndim else float(db)


def a_weighting_power(n_bins: int = N_BINS) -> np.ndarray:
    return 10 ** (a_weighting_db(bin_frequencies(n_bins)) / 10)


def frame_power_dba(spec: Spectrogram, calibration: Calibration | None = None,
                    bins=None) -> np.ndarray:
    """Per-frame A-weighted level in dBA.

    ``bins`` optionally restricts the weighted sum to a subset of STFT bins
    (boolean mask or index array). Silent frames are floored at -120 dBA.
    """
    calibration = calibration or Calibration()
    wa = a_weighting_power(spec.frames.shape[1])
    p = spec.power
    if bins is not None:
        wa = np.where(_bin_mask(bins, len(wa)), wa, 0.0)
    total = p @ wa * calibration.power_scale
    with np.errstate(divide="ignore"):
        db = 10 * np.log10(total)
    return np.maximum(db, POWER_FLOOR_DB)


def _bin_mask(bins, n):
    bins = np.asarray(bins)
    if bins.dtype == bool:
        return bins
    m = np.zeros(n, dtype=bool)
    m[bins] = True
    return m


def apply_gain_curve(signal: Signal, curve_db) -> Signal:
    """Filter by a static magnitude curve ``curve_db(frequency_hz)`` via STFT/ISTFT.

    The signal is zero-padded by a window on each side so every sample sits
    under full window overlap.
    """
    x = signal.samples if isinstance(signal, Signal) else np.asarray(signal, dtype=np.float64)
    padded = np.concatenate([np.zeros(WINDOW_LEN), x, np.zeros(2 * WINDOW_LEN)])
    spec = stft(padded)
    gain = 10 ** (np.asarray(curve_db(bin_frequencies())) / 20)
    y = istft(spec.with_frames(spec.frames * gain[None, :]), length=len(padded)).samples
    return Signal(y[WINDOW_LEN:WINDOW_LEN + len(x)], SAMPLE_RATE)
