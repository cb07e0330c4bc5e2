"""Command-line entry point: ``maskshaper <command> [options]``.

Commands: simulate, analyze, process, train, evaluate. Every command writes
into its ``--out`` directory and echoes the effective configuration there as
``config.resolved``. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bark import N_BANDS, band_psd
from .config import ConfigError, parse_assignments, resolve
from .evaluation import (
    evaluate_dataset, parse_method, score_gains, write_records_csv,
    write_records_jsonl, write_reports_json,
)
from .predictor import (
    ModelFormatError, build_training_set, init_model, load_model, predict_gains, save_model,
    train,
)
from .scenes import ENVIRONMENTS, build_manifest, load_manifest, load_pair, scene_from_wavs
from .shaping import gains_to_csv, render
from .signal_io import frame_power_dba, stft, write_wav
from .solvers import baseline_gains, prepare_scene, solve_gains

log = logging.getLogger("maskshaper")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

RECORDS_HELP = """\
records.csv / records.jsonl columns (one row per scene and method):
  scene_id, method        scene identifier and method label (solver:<dP> when constrained)
  nmr[_low|_mid|_high]    mean |noise - processed threshold| (dB) over initially unmasked
                          cells; empty when the range has no such cell
  nmr_initial[...]        the same with the unprocessed music
  gld[...]                mean |per-frame dBA change| of the music; ranges restrict the
                          A-weighted sum to the bins of bands 1-8, 9-16, 17-24
  m[...]                  number of initially unmasked (frame, band) cells
  l0                      mean ReLU(noise - processed threshold) over all frames and bands
  error                   load/processing error message, if any
stats.json: per compared method, mean Wilcoxon p over the scene batches (raw_p) and
the Bonferroni-corrected value (corrected_p, factor = number of metric/range pairs).
"""


class UsageError(Exception):
    pass


def _add_common(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--seed", type=int, help="random seed (config key seed)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maskshaper", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render synthetic scenes and a manifest")
    _add_common(p)
    p.add_argument("--envs", default="all", help=f"comma list or 'all' ({', '.join(ENVIRONMENTS)})")
    p.add_argument("--per-env", type=int, default=5, help="scenes per environment")
    p.add_argument("--duration", type=float, help="scene length in seconds (duration_s)")

    p = sub.add_parser("analyze", help="band levels, thresholds and need mask of a pair")
    _add_common(p)
    p.add_argument("--music", required=True)
    p.add_argument("--noise", required=True)

    p = sub.add_parser("process", help="compute gains and filter the music")
    _add_common(p)
    p.add_argument("--music", required=True)
    p.add_argument("--noise", required=True)
    p.add_argument("--method", required=True, choices=["estreder", "solver", "predictor"])
    p.add_argument("--model", help="model file (predictor method)")
    p.add_argument("--delta-p-max", type=float, help="power constraint in dBA (solver)")
    p.add_argument("--bit-depth", choices=["float32", "16", "24"])

    p = sub.add_parser("train", help="train the gain predictor on a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--delta-p-max", type=float)
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--frames-per-scene", type=int)

    p = sub.add_parser("evaluate", help="score methods on a manifest and test significance",
                       epilog=RECORDS_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--methods", default="none,estreder,solver",
                   help="comma list of none, estreder, solver, solver:<dP>, predictor")
    p.add_argument("--model", help="model file (predictor method)")
    p.add_argument("--batches", type=int, help="number of scene batches (eval_batches)")
    p.add_argument("--batch-size", type=int, help="scenes per batch (eval_batch_size)")
    p.add_argument("--baseline", help="reference method of the comparisons")
    return ap


_FLAG_KEYS = {
    "seed": "seed", "duration": "duration_s", "delta_p_max": "delta_p_max",
    "bit_depth": "bit_depth", "epochs": "epochs", "learning_rate": "learning_rate",
    "optimizer": "optimizer", "frames_per_scene": "frames_per_scene",
    "batches": "eval_batches", "baseline": "baseline",
}


def _resolve(args):
    over = parse_assignments(args.set)
    for attr, key in _FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            over[key] = v
    if getattr(args, "batch_size", None) is not None:
        over["eval_batch_size" if args.command == "evaluate" else "batch_size"] = args.batch_size
    return resolve(args.config, over)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_file(path, what):
    if path is None or not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _write_matrix(path, m, prefix):
    m = np.asarray(m, dtype=float)
    header = "frame," + ",".join(f"{prefix}{i}" for i in range(1, m.shape[1] + 1))
    np.savetxt(path, np.column_stack([np.arange(len(m)), m]), delimiter=",", header=header,
               comments="", fmt=["%d"] + ["%.6f"] * m.shape[1])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args, cfg):
    envs = list(ENVIRONMENTS) if args.envs == "all" else [e.strip() for e in args.envs.split(",")]
    bad = [e for e in envs if e not in ENVIRONMENTS]
    if bad:
        raise UsageError(f"unknown environment(s) {', '.join(bad)}; known: {', '.join(ENVIRONMENTS)}")
    if args.per_env < 1:
        raise UsageError("--per-env must be >= 1")
    out = _out_dir(args)
    path = build_manifest(envs, args.per_env, cfg.seed, out, cfg.duration_s, cfg.calibration())
    cfg.write_resolved(out)
    print(path)


def _load_user_scene(args, cfg):
    music = _need_file(args.music, "music file")
    noise = _need_file(args.noise, "noise file")
    pair = scene_from_wavs(music, noise)
    scene = prepare_scene(stft(pair.music), stft(pair.noise), cfg.calibration(),
                          cfg.abs_floor, cfg.reach_radius)
    return pair, scene


def cmd_analyze(args, cfg):
    _, scene = _load_user_scene(args, cfg)
    out = _out_dir(args)
    music_db = band_psd(scene.music, scene.calibration.power_scale).db
    _write_matrix(out / "music_bands.csv", music_db, "band")
    _write_matrix(out / "noise_bands.csv", scene.noise_db, "band")
    _write_matrix(out / "thresholds.csv", scene.initial_db, "band")
    _write_matrix(out / "need.csv", scene.mask.need, "band")
    _write_matrix(out / "active.csv", scene.mask.active, "band")
    init = scene.initial_db
    rec = score_gains(Path(args.music).stem, "none", scene, np.zeros((scene.n_frames, 24)))
    summary = {
        "n_frames": scene.n_frames,
        "n_bands": N_BANDS,
        "music_dba": float(np.mean(frame_power_dba(scene.music, scene.calibration))),
        "noise_dba": float(np.mean(frame_power_dba(scene.noise, scene.calibration))),
        "need_fraction": float(scene.mask.need.mean()),
        "active_fraction": float(scene.mask.active.mean()),
        "nmr_initial": rec.nmr_initial,
        "mean_gap_db": float(np.mean(np.maximum(scene.noise_db - init, 0))),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    cfg.write_resolved(out)


def cmd_process(args, cfg):
    if args.method == "predictor" and args.model is None:
        raise UsageError("--method predictor requires --model")
    model = None
    if args.method == "predictor":
        model = load_model(_need_file(args.model, "model file"))
    pair, scene = _load_user_scene(args, cfg)
    out = _out_dir(args)
    trace = None
    if args.method == "estreder":
        gains = baseline_gains(scene, cfg.beta)
    elif args.method == "solver":
        gains, trace = solve_gains(scene, cfg.solver_config())
    else:
        gains = predict_gains(model, scene, cfg.beta)
    y = render(pair.music, gains)
    res = write_wav(y, out / "processed.wav", cfg.bit_depth)
    gains_to_csv(gains, out / "gains.csv")
    if trace is not None:
        trace.to_csv(out / "trace.csv")
    label = args.method if args.method != "solver" or cfg.delta_p_max is None \
        else f"solver:{cfg.delta_p_max:g}"
    rec = score_gains(pair.spec.id, label, scene, gains)
    report = {
        "record": rec.flat(),
        "l0": rec.l0,
        "l_power": rec.gld["broadband"],
        "delta_p_max": cfg.delta_p_max if args.method == "solver" else None,
        "iterations": len(trace) if trace is not None else None,
        "final_lambda": trace.rows[-1].lam if trace is not None else None,
        "warnings": res.warnings,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    cfg.write_resolved(out)


def _load_scenes(manifest_path, cfg):
    manifest = _need_file(manifest_path, "manifest")
    entries = load_manifest(manifest)
    return manifest.parent, entries


def cmd_train(args, cfg):
    base, entries = _load_scenes(args.manifest, cfg)
    if not entries:
        raise UsageError(f"manifest {args.manifest} is empty")
    scenes = []
    for e in entries:
        pair = load_pair(e, base)
        scenes.append(prepare_scene(stft(pair.music), stft(pair.noise), cfg.calibration(),
                                    cfg.abs_floor, cfg.reach_radius))
    data = build_training_set(scenes, cfg.frames_per_scene, cfg.seed)
    tcfg = cfg.train_config()
    out = _out_dir(args)
    model, tlog = train(init_model(tcfg), data, tcfg)
    save_model(model, out / "model.dpnm")
    tlog.to_csv(out / "training_log.csv")
    cfg.write_resolved(out)


def cmd_evaluate(args, cfg):
    try:
        methods = [parse_method(m) for m in args.methods.split(",") if m.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if not methods:
        raise UsageError("no methods given")
    labels = [m.label for m in methods]
    if cfg.baseline not in labels:
        raise UsageError(f"baseline {cfg.baseline!r} is not among the methods {labels}")
    model = None
    if any(m.kind == "predictor" for m in methods):
        if args.model is None:
            raise UsageError("method predictor requires --model")
        model = load_model(_need_file(args.model, "model file"))
    base, entries = _load_scenes(args.manifest, cfg)
    out = _out_dir(args)
    records, reports = evaluate_dataset(entries, base, methods, cfg.eval_config(), model)
    write_records_csv(records, out / "records.csv")
    write_records_jsonl(records, out / "records.jsonl")
    write_reports_json(reports, out / "stats.json")
    cfg.write_resolved(out)


COMMANDS = {
    "simulate": cmd_simulate, "analyze": cmd_analyze, "process": cmd_process,
    "train": cmd_train, "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve(args)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError, ModelFormatError) as exc:
        print(f"maskshaper {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"maskshaper {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
