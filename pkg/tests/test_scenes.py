import json
from dataclasses import replace

import numpy as np
import pytest

from maskshaper.bark import band_psd, bark_bands
from maskshaper.scenes import (
    ENVIRONMENTS, HEADPHONES, ManifestEntry, SceneSpec, _shaped_noise, active_frame_ratio,
    apply_headphone, build_manifest, load_manifest, load_pair, mean_dba, music_level_for,
    normalize_dba, render_scene, sample_scene, scene_from_wavs, synth_music, synth_noise,
)
from maskshaper.signal_io import Signal, apply_gain_curve, bin_frequencies, read_wav, stft, write_wav

from _support import sine


@pytest.mark.parametrize("seed", range(20))
def test_construction_levels_truncated(seed):
    spec = sample_scene("construction", seed)
    assert 40 <= spec.noise_level_dba <= 95
    assert -5 <= spec.snr_db <= 15
    assert 45 <= spec.music_level_dba <= 100
    assert spec.headphone in HEADPHONES


def test_music_level_clamp():
    assert music_level_for(95.0, 15.0) == 100.0
    assert music_level_for(40.0, -5.0) == 45.0
    assert music_level_for(60.0, 5.0) == 65.0


def test_sample_scene_deterministic_and_validates():
    assert sample_scene("office", 7) == sample_scene("office", 7)
    assert sample_scene("office", 7) != sample_scene("office", 8)
    with pytest.raises(KeyError):
        sample_scene("moon", 0)


def test_level_distribution_means():
    for name, env in ENVIRONMENTS.items():
        levels = [sample_scene(name, s).noise_level_dba for s in range(300)]
        assert np.mean(levels) == pytest.approx(env.noise_level_mean, abs=1.0)


def ncc(a, b):
    a = a - a.mean()
    b = b - b.mean()
    return float(np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)))


def test_different_seeds_uncorrelated():
    s1 = sample_scene("urban", 1, 1.0)
    s2 = replace(s1, seed=2)
    assert abs(ncc(synth_noise(s1).samples, synth_noise(s2).samples)) < 0.1
    assert abs(ncc(synth_music(s1).samples, synth_music(s2).samples)) < 0.1
    np.testing.assert_array_equal(synth_music(s1).samples, synth_music(s1).samples)


def test_duration_honoured():
    spec = sample_scene("beach", 3, 10.0)
    assert len(synth_noise(spec)) == 441000 and len(synth_music(spec)) == 441000


def test_pink_recipe_slope():
    x = _shaped_noise(np.random.default_rng(0), 441000, -3.0, (20.0, 20000.0))
    spec = stft(x)
    b = bark_bands()
    density = band_psd(spec).linear.mean(axis=0) / np.bincount(b.bin_to_band)
    c = b.centers_hz
    sel = (c >= 100) & (c <= 5000)
    slope = np.polyfit(np.log2(c[sel]), 10 * np.log10(density[sel]), 1)[0]
    assert slope == pytest.approx(-3.0, abs=1.0)


def test_headphone_examples():
    x = np.random.default_rng(1).normal(size=44100) * 0.1
    flat = apply_gain_curve(Signal(x), lambda f: np.zeros_like(f))
    assert np.max(np.abs(flat.samples - x)) < 1e-6
    tone = Signal(sine(8000.0, 0.1, 1.0))
    out = apply_headphone(tone, "closed")
    k = int(np.argmin(np.abs(bin_frequencies() - 8000.0)))
    near = slice(k - 2, k + 3)
    before = stft(tone).power[2:-2, near].sum()
    after = stft(out).power[2:-2, near].sum()
    assert 10 * np.log10(after / before) == pytest.approx(-25.0, abs=1.0)
    noise = Signal(x)
    for name in HEADPHONES:
        assert mean_dba(apply_headphone(noise, name)) <= mean_dba(noise) + 1e-9


def test_headphone_profiles_shape():
    f = np.geomspace(20, 22050, 400)
    for p in HEADPHONES.values():
        a = p.attenuation_db(f)
        assert np.all(a <= 0)
        assert np.all(np.diff(a[f > 200]) <= 1e-12)


def test_headphone_reduces_high_band_noise():
    x = Signal(np.random.default_rng(2).normal(size=88200) * 0.1)
    b = bark_bands()
    for name, p in HEADPHONES.items():
        d = band_psd(stft(apply_headphone(x, name))).db.mean(0) - band_psd(stft(x)).db.mean(0)
        # compare against the profile averaged over each band's bins
        want = [10 * np.log10(np.mean(10 ** (p.attenuation_db(bin_frequencies()[b.bins_of(nu)]) / 10)))
                for nu in range(18, 25)]
        np.testing.assert_allclose(d[17:24], want, atol=1.0)


def test_normalize_examples():
    x = Signal(np.random.default_rng(3).normal(size=44100) * 0.01)
    y = normalize_dba(x, 70.0)
    assert mean_dba(y) == pytest.approx(70.0, abs=0.1)
    z = normalize_dba(y, 70.0)
    np.testing.assert_allclose(z.samples, y.samples, rtol=1e-6)
    w = normalize_dba(x, 80.0)
    np.testing.assert_allclose(w.samples / y.samples, 10 ** 0.5, rtol=1e-6)
    with pytest.raises(ValueError):
        normalize_dba(Signal(np.zeros(4096)), 70.0)


@pytest.mark.parametrize("env", sorted(ENVIRONMENTS))
def test_rendered_levels(env):
    spec = sample_scene(env, 11, 1.0)
    pair = render_scene(spec)
    assert mean_dba(pair.music) == pytest.approx(spec.music_level_dba, abs=0.2)
    # the noise is calibrated before the headphone; the at-ear level is recorded
    assert mean_dba(pair.noise) == pytest.approx(pair.spec.noise_at_ear_dba, abs=0.2)
    assert pair.spec.noise_at_ear_dba <= spec.noise_level_dba + 0.2


def test_manifest_counts_and_determinism(tmp_path):
    envs = sorted(ENVIRONMENTS)
    p1 = build_manifest(envs, 5, 3, tmp_path / "a", duration_s=0.2)
    p2 = build_manifest(envs, 5, 3, tmp_path / "b", duration_s=0.2)
    lines = p1.read_text().splitlines()
    assert len(lines) == 30
    assert len(list((tmp_path / "a" / "wav").glob("*.wav"))) == 60
    assert p1.read_bytes() == p2.read_bytes()
    for f in (tmp_path / "a" / "wav").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "wav" / f.name).read_bytes()
    first = json.loads(lines[0])
    for key in ("id", "environment", "headphone", "noise_level_dba", "snr_db",
                "music_level_dba", "music_path", "noise_path", "seed"):
        assert key in first


def test_manifest_roundtrip(tmp_path):
    path = build_manifest(["office", "beach"], 2, 4, tmp_path, duration_s=0.2)
    entries = load_manifest(path)
    assert len(entries) == 4
    for e in entries:
        again = ManifestEntry.from_json(e.to_json())
        assert again.spec == e.spec and isinstance(e.spec, SceneSpec)
        pair = load_pair(e, tmp_path)
        assert len(pair.music) == len(pair.noise) == round(0.2 * 44100)
    with pytest.raises(KeyError):
        build_manifest(["moon"], 1, 0, tmp_path / "x", duration_s=0.2)


def test_user_wavs(tmp_path):
    write_wav(Signal(sine(440.0, 0.3, 0.6)), tmp_path / "m.wav")
    write_wav(Signal(np.random.default_rng(5).normal(size=22050) * 0.05), tmp_path / "n.wav")
    pair = scene_from_wavs(tmp_path / "m.wav", tmp_path / "n.wav")
    assert len(pair.music) == len(pair.noise) == 22050
    quiet = np.zeros(44100)
    quiet[:4096] = 0.1
    write_wav(Signal(quiet), tmp_path / "q.wav")
    assert active_frame_ratio(read_wav(tmp_path / "q.wav")) < 0.5
    with pytest.raises(ValueError):
        scene_from_wavs(tmp_path / "m.wav", tmp_path / "q.wav")
