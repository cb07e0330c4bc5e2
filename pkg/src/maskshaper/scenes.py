"""Synthetic listening scenes: ambient noise through headphones plus a music proxy.

Levels are calibrated in dBA (see :class:`~maskshaper.signal_io.Calibration`).
Every random draw comes from a generator seeded by the scene seed, so a
manifest is a pure function of (environments, count, seed).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import truncnorm

from .signal_io import (
    SAMPLE_RATE, Calibration, Signal, apply_gain_curve, frame_power_dba, read_wav, stft,
    write_wav,
)

log = logging.getLogger(__name__)

NOISE_LEVEL_BOUNDS = (40.0, 95.0)
MUSIC_LEVEL_BOUNDS = (45.0, 100.0)
SNR_RANGE = (-5.0, 15.0)


@dataclass(frozen=True)
class EnvironmentProfile:
    name: str
    noise_level_mean: float
    noise_level_std: float
    slope_db_per_octave: float = -3.0
    band_hz: tuple[float, float] = (20.0, 20000.0)
    tones: tuple[tuple[float, float], ...] = ()  # (frequency, level re. noise rms in dB)
    modulation: tuple[float, float] = (0.0, 0.0)  # (rate Hz, depth)


ENVIRONMENTS = {
    p.name: p for p in [
        EnvironmentProfile("urban", 70, 5, -4.0, (30, 16000), modulation=(0.3, 0.3)),
        EnvironmentProfile("office", 55, 5, -3.0, (100, 8000), tones=((120.0, -25.0),)),
        EnvironmentProfile("construction", 85, 5, -1.5, (50, 18000),
                           tones=((1250.0, -12.0), (2500.0, -18.0)), modulation=(4.0, 0.4)),
        EnvironmentProfile("beach", 65, 5, -2.0, (150, 12000), modulation=(0.12, 0.5)),
        EnvironmentProfile("transport", 75, 5, -6.0, (20, 6000), tones=((110.0, -10.0),)),
        EnvironmentProfile("restaurant", 70, 5, -3.0, (250, 4000), modulation=(3.0, 0.5)),
    ]
}


@dataclass(frozen=True)
class HeadphoneProfile:
    name: str
    points: tuple[tuple[float, float], ...]  # (frequency Hz, attenuation dB)

    def attenuation_db(self, frequency_hz):
        f = np.maximum(np.asarray(frequency_hz, dtype=np.float64), 1.0)
        pf = np.array([p[0] for p in self.points])
        pa = np.array([p[1] for p in self.points])
        return np.interp(np.log(f), np.log(pf), pa)


HEADPHONES = {
    p.name: p for p in [
        HeadphoneProfile("earbud", ((20, 0.0), (500, 0.0), (10000, -15.0), (22050, -15.0))),
        HeadphoneProfile("closed", ((20, -3.0), (200, -3.0), (1000, -12.0), (8000, -25.0),
                                    (10000, -30.0), (22050, -30.0))),
        HeadphoneProfile("semi_open", ((20, -1.0), (500, -1.0), (10000, -10.0), (22050, -10.0))),
    ]
}


@dataclass(frozen=True)
class SceneSpec:
    environment: str
    headphone: str
    noise_level_dba: float
    snr_db: float
    music_level_dba: float
    duration_s: float = 10.0
    seed: int = 0
    id: str = ""
    # level of the noise after passive attenuation, filled in once synthesised
    noise_at_ear_dba: float | None = None


@dataclass
class ScenePair:
    music: Signal
    noise: Signal
    spec: SceneSpec


def music_level_for(noise_level_dba: float, snr_db: float) -> float:
    return float(np.clip(noise_level_dba + snr_db, *MUSIC_LEVEL_BOUNDS))


def sample_scene(environment: str, rng_seed: int, duration_s: float = 10.0) -> SceneSpec:
    if environment not in ENVIRONMENTS:
        raise KeyError(f"unknown environment {environment!r}; known: {sorted(ENVIRONMENTS)}")
    env = ENVIRONMENTS[environment]
    rng = np.random.default_rng(rng_seed)
    lo, hi = NOISE_LEVEL_BOUNDS
    a = (lo - env.noise_level_mean) / env.noise_level_std
    b = (hi - env.noise_level_mean) / env.noise_level_std
    level = float(truncnorm.rvs(a, b, loc=env.noise_level_mean, scale=env.noise_level_std,
                                random_state=rng))
    snr = float(rng.uniform(*SNR_RANGE))
    headphone = sorted(HEADPHONES)[int(rng.integers(len(HEADPHONES)))]
    return SceneSpec(environment, headphone, level, snr, music_level_for(level, snr),
                     duration_s, int(rng_seed))


def _n_samples(duration_s):
    return int(round(duration_s * SAMPLE_RATE))


def _shaped_noise(rng, n, slope_db_per_octave, band_hz, rolloff_octaves=0.5):
    """White Gaussian noise given a power-law spectral tilt and soft band limits."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
    f_safe = np.maximum(f, 1.0)
    gain_db = slope_db_per_octave * np.log2(f_safe / 1000.0)
    lo, hi = band_hz
    below = np.log2(np.maximum(lo / f_safe, 1.0))
    above = np.log2(np.maximum(f_safe / hi, 1.0))
    gain_db -= 24.0 * (below + above) / rolloff_octaves
    g = 10 ** (gain_db / 20)
    g[0] = 0.0
    x = np.fft.irfft(spec * g, n)
    return x / np.sqrt(np.mean(x ** 2))


def synth_noise(spec: SceneSpec) -> Signal:
    """Environment-shaped noise at an arbitrary level (normalise afterwards)."""
    env = ENVIRONMENTS[spec.environment]
    rng = np.random.default_rng([spec.seed, 1])
    n = _n_samples(spec.duration_s)
    t = np.arange(n) / SAMPLE_RATE
    x = _shaped_noise(rng, n, env.slope_db_per_octave, env.band_hz)
    for freq, rel_db in env.tones:
        phase = rng.uniform(0, 2 * np.pi)
        x = x + np.sqrt(2) * 10 ** (rel_db / 20) * np.sin(2 * np.pi * freq * t + phase)
    rate, depth = env.modulation
    if depth > 0:
        x = x * (1 + depth * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    return Signal(x)


def synth_music(spec: SceneSpec) -> Signal:
    """Music stand-in: chord sequence of harmonic tones over a pink noise bed."""
    rng = np.random.default_rng([spec.seed, 2])
    n = _n_samples(spec.duration_s)
    t = np.arange(n) / SAMPLE_RATE
    x = np.zeros(n)
    seg = int(rng.uniform(0.4, 1.2) * SAMPLE_RATE)
    fade = np.minimum(1.0, np.minimum(np.arange(seg), np.arange(seg)[::-1]) / 441.0)
    n_harm = int(rng.integers(6, 16))
    roll = rng.uniform(0.7, 1.5)
    for start in range(0, n, seg):
        stop = min(n, start + seg)
        tt = t[start:stop]
        root = 55.0 * 2 ** (rng.integers(12, 40) / 12)
        for semis in (0, int(rng.choice([3, 4])), 7):
            f0 = root * 2 ** (semis / 12)
            for h in range(1, n_harm + 1):
                if f0 * h >= 16000:
                    break
                amp = h ** -roll
                x[start:stop] += amp * np.sin(2 * np.pi * f0 * h * tt + rng.uniform(0, 2 * np.pi)) \
                    * fade[: stop - start]
    x /= np.sqrt(np.mean(x ** 2))
    bed = _shaped_noise(rng, n, -3.0, (40, 16000))
    x = x + 10 ** (rng.uniform(-24, -12) / 20) * bed
    am = 1 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t + rng.uniform(0, 2 * np.pi))
    return Signal(x * am)


def apply_headphone(noise: Signal, profile: HeadphoneProfile | str) -> Signal:
    """Passive attenuation applied in the STFT domain."""
    if isinstance(profile, str):
        profile = HEADPHONES[profile]
    return apply_gain_curve(noise, profile.attenuation_db)


def mean_dba(signal: Signal, calibration: Calibration | None = None) -> float:
    return float(np.mean(frame_power_dba(stft(signal), calibration)))


def normalize_dba(signal: Signal, target_dba: float,
                  calibration: Calibration | None = None) -> Signal:
    """Scale so the mean per-frame dBA hits ``target_dba`` (within 0.1 dB)."""
    x = signal.samples
    if not np.any(x):
        raise ValueError("cannot normalise a silent signal")
    for _ in range(4):
        err = target_dba - mean_dba(Signal(x), calibration)
        if abs(err) < 1e-9:
            break
        x = x * 10 ** (err / 20)
    return Signal(x, signal.sample_rate)


def active_frame_ratio(signal: Signal, rel_db: float = -50.0) -> float:
    """Share of 2048-sample frames whose RMS is within ``rel_db`` of the loudest."""
    x = signal.samples
    n = len(x) // 2048
    if n == 0:
        return 0.0
    rms = np.sqrt(np.mean(x[: n * 2048].reshape(n, 2048) ** 2, axis=1))
    if rms.max() == 0:
        return 0.0
    return float(np.mean(rms > rms.max() * 10 ** (rel_db / 20)))


def render_scene(spec: SceneSpec, calibration: Calibration | None = None) -> ScenePair:
    noise = normalize_dba(synth_noise(spec), spec.noise_level_dba, calibration)
    noise = apply_headphone(noise, spec.headphone)
    music = normalize_dba(synth_music(spec), spec.music_level_dba, calibration)
    at_ear = round(mean_dba(noise, calibration), 6)
    spec = SceneSpec(**{**asdict(spec), "noise_at_ear_dba": at_ear})
    return ScenePair(music, noise, spec)


def scene_from_wavs(music_path, noise_path, min_active_ratio: float = 0.5) -> ScenePair:
    """Pair user-supplied WAVs, rejecting mostly-silent noise recordings."""
    music = read_wav(music_path)
    noise = read_wav(noise_path)
    if active_frame_ratio(noise) < min_active_ratio:
        raise ValueError(f"{noise_path}: mostly silent (active-frame ratio < {min_active_ratio})")
    n = min(len(music), len(noise))
    music, noise = Signal(music.samples[:n]), Signal(noise.samples[:n])
    spec = SceneSpec("user", "none", mean_dba(noise), mean_dba(music) - mean_dba(noise),
                     mean_dba(music), n / SAMPLE_RATE, 0, Path(music_path).stem,
                     noise_at_ear_dba=mean_dba(noise))
    return ScenePair(music, noise, spec)


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass
class ManifestEntry:
    spec: SceneSpec
    music_path: str
    noise_path: str
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = {"id": self.spec.id, **{k: v for k, v in asdict(self.spec).items() if k != "id"},
             "music_path": self.music_path, "noise_path": self.noise_path}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        d = json.loads(line)
        music_path, noise_path = d.pop("music_path"), d.pop("noise_path")
        known = SceneSpec.__dataclass_fields__
        spec = SceneSpec(**{k: v for k, v in d.items() if k in known})
        return cls(spec, music_path, noise_path, {k: v for k, v in d.items() if k not in known})


def build_manifest(env_list, count_per_env: int, seed: int, out_dir,
                   duration_s: float = 10.0, calibration: Calibration | None = None) -> Path:
    """Render ``count_per_env`` scenes per environment to WAV + ``manifest.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "wav").mkdir(exist_ok=True)
    lines = []
    index = 0
    for env in env_list:
        if env not in ENVIRONMENTS:
            raise KeyError(f"unknown environment {env!r}")
        for j in range(count_per_env):
            spec = sample_scene(env, scene_seed(seed, index), duration_s)
            spec = SceneSpec(**{**asdict(spec), "id": f"{env}_{j:04d}"})
            pair = render_scene(spec, calibration)
            music_rel = f"wav/{spec.id}_music.wav"
            noise_rel = f"wav/{spec.id}_noise.wav"
            write_wav(pair.music, out / music_rel)
            write_wav(pair.noise, out / noise_rel)
            lines.append(ManifestEntry(pair.spec, music_rel, noise_rel).to_json())
            index += 1
            log.info("scene %s: noise %.1f dBA, music %.1f dBA", spec.id,
                     spec.noise_level_dba, spec.music_level_dba)
    path = out / "manifest.jsonl"
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def load_manifest(path) -> list[ManifestEntry]:
    text = Path(path).read_text(encoding="utf-8")
    return [ManifestEntry.from_json(line) for line in text.splitlines() if line.strip()]


def load_pair(entry: ManifestEntry, base_dir) -> ScenePair:
    base = Path(base_dir)
    return ScenePair(read_wav(base / entry.music_path), read_wav(base / entry.noise_path), entry.spec)
