"""Masking and fidelity metrics, dataset evaluation and significance testing.

NMR averages |noise - processed threshold| over the (frame, band) cells
where the unprocessed music did not mask the noise. GLD is the mean absolute
per-frame change of A-weighted level. Both are also reported on three
frequency ranges of eight gain bands each.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .bark import N_BANDS, bark_bands
from .predictor import predict_gains
from .scenes import load_pair
from .shaping import DEFAULT_BETA, N_GAIN_BANDS, apply_gains
from .signal_io import Calibration, Spectrogram, frame_power_dba, stft
from .solvers import (
    Scene, SolverConfig, baseline_gains, prepare_scene, processed_thresholds, solve_gains,
)

log = logging.getLogger(__name__)

# 1-based inclusive band ranges; broadband NMR covers all analysis bands
RANGES = {
    "broadband": (1, N_BANDS),
    "low": (1, 8),
    "mid": (9, 16),
    "high": (17, 24),
}
EXACT_MAX_N = 20


def range_bands(name: str) -> np.ndarray:
    """Boolean mask over the 26 bands for a named range."""
    lo, hi = RANGES[name]
    idx = np.arange(1, N_BANDS + 1)
    return (idx >= lo) & (idx <= hi)


def range_bins(name: str) -> np.ndarray:
    """Boolean mask over STFT bins belonging to a named range."""
    if name == "broadband":
        return np.ones(len(bark_bands().bin_to_band), dtype=bool)
    return range_bands(name)[bark_bands().bin_to_band]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def nmr(noise_db, processed_threshold_db, initial_threshold_db, range_name="broadband"):
    """Mean |noise - processed threshold| over initially unmasked cells, or None."""
    noise_db = np.asarray(noise_db)
    sel = (np.asarray(initial_threshold_db) < noise_db) & range_bands(range_name)[None, :]
    if not sel.any():
        return None
    return float(np.mean(np.abs(noise_db - np.asarray(processed_threshold_db))[sel]))


def valid_band_count(noise_db, initial_threshold_db, range_name="broadband") -> int:
    sel = np.asarray(initial_threshold_db) < np.asarray(noise_db)
    return int(np.count_nonzero(sel & range_bands(range_name)[None, :]))


def gld(original: Spectrogram, processed: Spectrogram, range_name="broadband",
        calibration: Calibration | None = None) -> float:
    if original.n_frames != processed.n_frames:
        raise ValueError("frame count mismatch")
    bins = None if range_name == "broadband" else range_bins(range_name)
    a = frame_power_dba(original, calibration, bins)
    b = frame_power_dba(processed, calibration, bins)
    return float(np.mean(np.abs(b - a)))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test
# ---------------------------------------------------------------------------

def _midranks(x):
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1
        i = j + 1
    return ranks


def _exact_p(ranks, t_plus):
    # ranks are multiples of 0.5: count sign assignments over doubled ranks
    r2 = np.rint(2 * ranks).astype(int)
    total = int(r2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts += shifted
    probs = counts / counts.sum()
    t2 = int(round(2 * t_plus))
    lower = probs[:t2 + 1].sum()
    upper = probs[t2:].sum()
    return min(1.0, 2 * min(lower, upper))


def _normal_p(ranks, t_plus):
    n = len(ranks)
    mean = n * (n + 1) / 4
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(counts ** 3 - counts) / 48
    if var <= 0:
        return 1.0
    z = max(abs(t_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2 * ndtr(-z)))


def wilcoxon_signed_rank(a, b, method: str = "auto") -> float:
    """Two-sided p-value of the signed-rank test on paired samples.

    Zero differences are dropped. ``auto`` uses the exact null distribution
    (midranks for ties) up to 20 nonzero pairs and the normal approximation
    with tie and continuity corrections beyond.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1:
        raise ValueError("paired samples must be one-dimensional")
    if len(d) < 5:
        raise ValueError("need at least 5 pairs")
    d = d[d != 0]
    if len(d) == 0:
        return 1.0
    ranks = _midranks(np.abs(d))
    t_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if len(d) <= EXACT_MAX_N else "normal"
    if method == "exact":
        return _exact_p(ranks, t_plus)
    if method == "normal":
        return _normal_p(ranks, t_plus)
    raise ValueError(f"unknown method {method!r}")


def bonferroni(p, n_comparisons: int) -> float:
    return min(1.0, p * n_comparisons)


# ---------------------------------------------------------------------------
# methods and records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Method:
    kind: str  # none | estreder | solver | predictor
    delta_p_max: float | None = None

    @property
    def label(self) -> str:
        if self.kind == "solver" and self.delta_p_max is not None:
            return f"solver:{self.delta_p_max:g}"
        return self.kind


def parse_method(text: str) -> Method:
    """``none``, ``estreder``, ``predictor``, ``solver`` or ``solver:<dP_max dBA>``."""
    kind, _, arg = text.strip().partition(":")
    if kind not in ("none", "estreder", "solver", "predictor"):
        raise ValueError(f"unknown method {text!r}")
    if arg and kind != "solver":
        raise ValueError(f"method {kind} takes no argument")
    return Method(kind, float(arg) if arg else None)


@dataclass
class EvalConfig:
    batches: int = 20
    batch_size: int = 10
    seed: int = 0
    baseline: str = "estreder"
    beta: float = DEFAULT_BETA
    solver: SolverConfig = field(default_factory=SolverConfig)
    calibration: Calibration = field(default_factory=Calibration)
    abs_floor: bool = True


@dataclass
class EvalRecord:
    scene_id: str
    method: str
    nmr: dict = field(default_factory=dict)          # range -> dB or None
    nmr_initial: dict = field(default_factory=dict)
    gld: dict = field(default_factory=dict)          # range -> dBA
    valid_bands: dict = field(default_factory=dict)  # range -> M
    l0: float | None = None
    error: str | None = None

    def flat(self) -> dict:
        row = {"scene_id": self.scene_id, "method": self.method}
        for name in RANGES:
            suffix = "" if name == "broadband" else f"_{name}"
            row[f"nmr{suffix}"] = self.nmr.get(name)
            row[f"nmr_initial{suffix}"] = self.nmr_initial.get(name)
            row[f"gld{suffix}"] = self.gld.get(name)
            row[f"m{suffix}"] = self.valid_bands.get(name)
        row["l0"] = self.l0
        row["error"] = self.error
        return row


RECORD_COLUMNS = list(EvalRecord("", "").flat())


def method_gains(method: Method, scene: Scene, cfg: EvalConfig, model=None):
    if method.kind == "none":
        return np.zeros((scene.n_frames, N_GAIN_BANDS))
    if method.kind == "estreder":
        return baseline_gains(scene, cfg.beta)
    if method.kind == "solver":
        scfg = SolverConfig(**{**asdict(cfg.solver), "delta_p_max": method.delta_p_max})
        return solve_gains(scene, scfg)[0]
    if method.kind == "predictor":
        if model is None:
            raise ValueError("predictor method needs a model")
        return predict_gains(model, scene, cfg.beta)
    raise ValueError(f"unknown method {method.kind!r}")


def score_gains(scene_id, method_label, scene: Scene, gains) -> EvalRecord:
    thr = processed_thresholds(scene, gains).db
    init = scene.initial_db
    processed = apply_gains(scene.music, gains)
    rec = EvalRecord(scene_id, method_label)
    for name in RANGES:
        rec.nmr[name] = nmr(scene.noise_db, thr, init, name)
        rec.nmr_initial[name] = nmr(scene.noise_db, init, init, name)
        rec.gld[name] = gld(scene.music, processed, name, scene.calibration)
        rec.valid_bands[name] = valid_band_count(scene.noise_db, init, name)
    rec.l0 = float(np.mean(np.maximum(scene.noise_db - thr, 0.0)))
    return rec


def evaluate_scene(scene_id, scene: Scene, methods, cfg: EvalConfig, model=None):
    return [score_gains(scene_id, m.label, scene, method_gains(m, scene, cfg, model))
            for m in methods]


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

@dataclass
class StatReport:
    comparison: str
    batches: int
    batch_size: int
    seed: int
    n_comparisons: int
    raw_p: dict = field(default_factory=dict)        # "nmr_low" -> mean p (or None)
    corrected_p: dict = field(default_factory=dict)
    batches_used: dict = field(default_factory=dict)
    mean_difference: dict = field(default_factory=dict)  # method - baseline


def _metric_value(rec: EvalRecord, metric: str, range_name: str):
    return (rec.nmr if metric == "nmr" else rec.gld).get(range_name)


def compare(records, method: str, baseline: str, cfg: EvalConfig) -> StatReport:
    """Mean Wilcoxon p over seeded scene batches, per metric and range."""
    by = {}
    for r in records:
        if r.error is None:
            by.setdefault(r.scene_id, {})[r.method] = r
    ids = sorted(sid for sid, d in by.items() if method in d and baseline in d)
    keys = [(m, rng) for m in ("nmr", "gld") for rng in RANGES]
    report = StatReport(f"{method} vs {baseline}", cfg.batches, cfg.batch_size, cfg.seed, len(keys))
    if not ids:
        return report
    rng = np.random.default_rng(cfg.seed)
    size = min(cfg.batch_size, len(ids))
    draws = [rng.choice(len(ids), size, replace=False) for _ in range(cfg.batches)]
    for metric, rname in keys:
        name = metric if rname == "broadband" else f"{metric}_{rname}"
        pairs = [(_metric_value(by[s][method], metric, rname),
                  _metric_value(by[s][baseline], metric, rname)) for s in ids]
        valid = np.array([a is not None and b is not None for a, b in pairs])
        a = np.array([p[0] if v else np.nan for p, v in zip(pairs, valid)])
        b = np.array([p[1] if v else np.nan for p, v in zip(pairs, valid)])
        ps = []
        for idx in draws:
            idx = idx[valid[idx]]
            if len(idx) >= 5:
                ps.append(wilcoxon_signed_rank(a[idx], b[idx]))
        report.batches_used[name] = len(ps)
        report.mean_difference[name] = float(np.mean(a[valid] - b[valid])) if valid.any() else None
        if ps:
            p = float(np.mean(ps))
            report.raw_p[name] = p
            report.corrected_p[name] = bonferroni(p, len(keys))
        else:
            report.raw_p[name] = report.corrected_p[name] = None
    return report


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def evaluate_dataset(entries, base_dir, methods, cfg: EvalConfig | None = None, model=None):
    """Evaluate every manifest entry with every method.

    Returns ``(records, reports)``: one record per (scene, method), scenes in
    manifest order; one report per non-baseline method. Scenes that fail to
    load produce error records and the run continues.
    """
    cfg = cfg or EvalConfig()
    methods = [parse_method(m) if isinstance(m, str) else m for m in methods]
    records = []
    for entry in entries:
        try:
            pair = load_pair(entry, base_dir)
            scene = prepare_scene(stft(pair.music), stft(pair.noise), cfg.calibration,
                                  cfg.abs_floor, cfg.solver.reach_radius)
        except (OSError, ValueError) as exc:
            log.error("scene %s: %s", entry.spec.id, exc)
            records.extend(EvalRecord(entry.spec.id, m.label, error=str(exc)) for m in methods)
            continue
        records.extend(evaluate_scene(entry.spec.id, scene, methods, cfg, model))
    reports = [compare(records, m.label, cfg.baseline, cfg) for m in methods
               if m.label != cfg.baseline]
    return records, reports


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.9g}"
    return v


def write_records_csv(records, path):
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=RECORD_COLUMNS)
        wr.writeheader()
        for r in records:
            wr.writerow({k: _fmt(v) for k, v in r.flat().items()})


def write_records_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def write_reports_json(reports, path):
    Path(path).write_text(json.dumps([asdict(r) for r in reports], indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
