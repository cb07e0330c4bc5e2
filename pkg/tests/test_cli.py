import csv
import hashlib
import json

import numpy as np
import pytest

from maskshaper.cli import main
from maskshaper.config import ConfigError, RunConfig, parse_assignments, resolve
from maskshaper.scenes import render_scene, sample_scene
from maskshaper.signal_io import Signal, read_wav, write_wav

from _support import amp_for_spl, sine


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digest(root):
    return {str(p.relative_to(root)): digest(p) for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--envs", "office,urban,construction", "--per-env", "2",
                 "--seed", "3", "--duration", "0.6", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def pair(tmp_path_factory):
    d = tmp_path_factory.mktemp("pair")
    p = render_scene(sample_scene("construction", 41, 1.5))
    write_wav(p.music, d / "music.wav")
    write_wav(p.noise, d / "noise.wav")
    return d


def test_simulate_all(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["simulate", "--envs", "all", "--per-env", "5", "--seed", "7", "--duration", "0.1"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert len((a / "manifest.jsonl").read_text().splitlines()) == 30
    assert tree_digest(a) == tree_digest(b)
    assert "seed = 7" in (a / "config.resolved").read_text()


def test_simulate_bad_env(tmp_path, capsys):
    assert main(["simulate", "--envs", "moon", "--out", str(tmp_path)]) == 2
    assert "moon" in capsys.readouterr().err


def test_usage_and_config_errors(tmp_path, pair):
    assert main([]) == 2
    assert main(["simulate"]) == 2  # --out missing
    assert main(["simulate", "--set", "bogus=1", "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--set", "beta=abc", "--out", str(tmp_path)]) == 2
    cfg = tmp_path / "bad.conf"
    cfg.write_text("window_len = 1024\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--config", str(tmp_path / "none.conf"), "--out", str(tmp_path)]) == 2


def test_config_file_and_overrides(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# comment\nbeta = 0.5\ndelta_p_max = 1.5\nsmoothing_in_loop = yes\n")
    cfg = resolve(conf, parse_assignments(["beta=0.6"]))
    assert cfg.beta == 0.6 and cfg.delta_p_max == 1.5 and cfg.smoothing_in_loop is True
    assert resolve(None, {"delta_p_max": None}).delta_p_max is None
    with pytest.raises(ConfigError):
        parse_assignments(["nokey"])
    with pytest.raises(ConfigError):
        resolve(None, {"optimizer": "rmsprop"})
    text = RunConfig().dump()
    keys = [line.split(" = ")[0] for line in text.splitlines()]
    assert keys == list(RunConfig.__dataclass_fields__)
    # the dump reads back to the same configuration
    (tmp_path / "again.conf").write_text(text)
    assert resolve(tmp_path / "again.conf") == RunConfig()


def test_analyze(tmp_path, pair):
    out = tmp_path / "an"
    assert main(["analyze", "--music", str(pair / "music.wav"), "--noise", str(pair / "noise.wav"),
                 "--out", str(out)]) == 0
    for name in ("music_bands.csv", "noise_bands.csv", "thresholds.csv", "need.csv",
                 "active.csv", "summary.json", "config.resolved"):
        assert (out / name).is_file()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_bands"] == 26 and summary["n_frames"] > 0
    with open(out / "thresholds.csv") as fh:
        head = next(csv.reader(fh))
    assert head[0] == "frame" and len(head) == 27


def test_process_fully_masked_is_identity(tmp_path):
    music = Signal(sine(1000.0, amp_for_spl(80.0), 0.5) + 0.001 * sine(3000.0, 1.0, 0.5))
    noise = Signal(np.random.default_rng(0).normal(size=len(music)) * 1e-7)
    write_wav(music, tmp_path / "m.wav")
    write_wav(noise, tmp_path / "n.wav")
    out = tmp_path / "p"
    assert main(["process", "--music", str(tmp_path / "m.wav"), "--noise", str(tmp_path / "n.wav"),
                 "--method", "estreder", "--out", str(out)]) == 0
    y = read_wav(out / "processed.wav").samples
    x = read_wav(tmp_path / "m.wav").samples
    assert len(y) == len(x) and np.max(np.abs(y - x)) < 1e-6
    gains = np.loadtxt(out / "gains.csv", delimiter=",", skiprows=1)
    assert not np.any(gains[:, 1:])


def test_process_solver_with_budget(tmp_path, pair):
    out = tmp_path / "s"
    before = tree_digest(pair)
    assert main(["process", "--music", str(pair / "music.wav"), "--noise", str(pair / "noise.wav"),
                 "--method", "solver", "--delta-p-max", "1", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["l_power"] <= 1.2
    assert report["record"]["method"] == "solver:1"
    assert (out / "trace.csv").read_text().startswith("iteration,l0,l_power,lambda,total")
    assert "delta_p_max = 1.0" in (out / "config.resolved").read_text()
    assert tree_digest(pair) == before  # inputs untouched


def test_process_predictor_needs_model(tmp_path, pair, capsys):
    args = ["process", "--music", str(pair / "music.wav"), "--noise", str(pair / "noise.wav"),
            "--method", "predictor", "--out", str(tmp_path)]
    assert main(args) == 2
    assert "--model" in capsys.readouterr().err
    assert main(args + ["--model", str(tmp_path / "missing.dpnm")]) == 2
    (tmp_path / "junk.dpnm").write_bytes(b"junk")
    assert main(args + ["--model", str(tmp_path / "junk.dpnm")]) == 2


def test_process_missing_input(tmp_path):
    assert main(["process", "--music", str(tmp_path / "x.wav"), "--noise", str(tmp_path / "y.wav"),
                 "--method", "estreder", "--out", str(tmp_path / "o")]) == 2


def test_process_runtime_failure(tmp_path, pair):
    write_wav(Signal(np.zeros(22050)), tmp_path / "silent.wav")
    # a silent noise recording is rejected by the activity check
    assert main(["process", "--music", str(pair / "music.wav"), "--noise", str(tmp_path / "silent.wav"),
                 "--method", "estreder", "--out", str(tmp_path / "o")]) == 1


def test_train_and_reproducible(tmp_path, dataset, pair):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["train", "--manifest", str(dataset / "manifest.jsonl"), "--epochs", "2",
            "--batch-size", "16", "--seed", "5"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert digest(a / "model.dpnm") == digest(b / "model.dpnm")
    assert digest(a / "training_log.csv") == digest(b / "training_log.csv")
    with open(a / "training_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and float(rows[1]["total"]) < float(rows[0]["total"])
    out = tmp_path / "p"
    assert main(["process", "--music", str(pair / "music.wav"), "--noise", str(pair / "noise.wav"),
                 "--method", "predictor", "--model", str(a / "model.dpnm"), "--out", str(out)]) == 0
    g = np.loadtxt(out / "gains.csv", delimiter=",", skiprows=1)[:, 1:]
    assert np.all((g >= -5) & (g <= 10))


def test_train_missing_manifest(tmp_path):
    assert main(["train", "--manifest", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)]) == 2


def test_evaluate(tmp_path, dataset):
    out = tmp_path / "e"
    assert main(["evaluate", "--manifest", str(dataset / "manifest.jsonl"),
                 "--methods", "none,estreder,solver", "--batches", "100", "--batch-size", "50",
                 "--set", "max_iters=80", "--out", str(out)]) == 0
    with open(out / "records.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 6
    stats = json.loads((out / "stats.json").read_text())
    assert {s["comparison"] for s in stats} == {"none vs estreder", "solver vs estreder"}
    for s in stats:
        assert s["batches"] == 100 and s["batch_size"] == 50
        assert "nmr" in s["raw_p"] and "nmr" in s["corrected_p"]
    assert "eval_batches = 100" in (out / "config.resolved").read_text()


def test_evaluate_errors(tmp_path, dataset):
    m = str(dataset / "manifest.jsonl")
    assert main(["evaluate", "--manifest", m, "--methods", "none,magic", "--out", str(tmp_path)]) == 2
    assert main(["evaluate", "--manifest", m, "--methods", "none,solver", "--out", str(tmp_path)]) == 2
    assert main(["evaluate", "--manifest", m, "--methods", "estreder,predictor",
                 "--out", str(tmp_path)]) == 2


def test_evaluate_help_documents_columns(capsys):
    assert main(["evaluate", "--help"]) == 0
    out = capsys.readouterr().out
    for col in ("nmr_initial", "gld", "corrected_p", "scene_id"):
        assert col in out
