"""Run configuration: one flat set of ``key = value`` tunables.

Values come from the defaults below, then an optional configuration file,
then command-line overrides. Unknown keys are rejected. The resolved set is
written next to every command's outputs as ``config.resolved``.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .evaluation import EvalConfig
from .predictor import TrainConfig
from .signal_io import HOP, WINDOW_LEN, Calibration
from .solvers import SolverConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # analysis grid (fixed; present so runs record it)
    window_len: int = WINDOW_LEN
    hop: int = HOP
    spl_at_fullscale: float = 100.0
    abs_floor: bool = True
    # gain pipeline
    beta: float = 0.8
    reach_radius: int = 3
    # solver
    delta_p_max: float | None = None
    step_size: float = 0.5
    lambda_rate: float = 1e-3
    max_iters: int = 2000
    tolerance: float = 1e-3
    patience: int = 30
    smoothing_in_loop: bool = False
    # predictor training
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 64
    optimizer: str = "sgd"
    frames_per_scene: int | None = None
    # simulation
    seed: int = 0
    duration_s: float = 10.0
    # evaluation
    eval_batches: int = 20
    eval_batch_size: int = 10
    baseline: str = "estreder"
    bit_depth: str = "float32"

    def validate(self):
        if self.window_len != WINDOW_LEN or self.hop != HOP:
            raise ConfigError(f"only window_len={WINDOW_LEN}, hop={HOP} are supported")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, not {self.optimizer!r}")
        if self.bit_depth not in ("float32", "16", "24"):
            raise ConfigError(f"bit_depth must be float32, 16 or 24, not {self.bit_depth!r}")
        if not 0 <= self.beta < 1:
            raise ConfigError("beta must lie in [0, 1)")
        if self.duration_s * 44100 < WINDOW_LEN:
            raise ConfigError("duration_s is shorter than one analysis window")
        try:
            self.solver_config()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def calibration(self) -> Calibration:
        return Calibration(self.spl_at_fullscale)

    def solver_config(self, **over) -> SolverConfig:
        kw = dict(delta_p_max=self.delta_p_max, step_size=self.step_size,
                  lambda_rate=self.lambda_rate, max_iters=self.max_iters,
                  tolerance=self.tolerance, patience=self.patience,
                  reach_radius=self.reach_radius, smoothing_in_loop=self.smoothing_in_loop,
                  beta=self.beta)
        kw.update(over)
        return SolverConfig(**kw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, learning_rate=self.learning_rate,
                           batch_size=self.batch_size, lambda_rate=self.lambda_rate,
                           delta_p_max=self.delta_p_max, seed=self.seed,
                           optimizer=self.optimizer)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(batches=self.eval_batches, batch_size=self.eval_batch_size,
                          seed=self.seed, baseline=self.baseline, beta=self.beta,
                          solver=self.solver_config(delta_p_max=None),
                          calibration=self.calibration(), abs_floor=self.abs_floor)

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format(v)}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, out_dir) -> Path:
        path = Path(out_dir) / "config.resolved"
        path.write_text(self.dump(), encoding="utf-8")
        return path


def _format(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, text):
    kind = _TYPES[key]
    text = text.strip()
    optional = "None" in kind
    if optional and text.lower() in ("none", ""):
        return None
    try:
        if kind.startswith("bool"):
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r} (expected {kind})") from None


def parse_assignments(pairs) -> dict:
    """``key=value`` strings or (key, value) tuples to a typed override dict."""
    out = {}
    for item in pairs:
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
        else:
            key, value = item
        key = key.strip().replace("-", "_")
        if key not in _TYPES:
            raise ConfigError(f"unknown configuration key {key!r}")
        out[key] = _coerce(key, str(value))
    return out


def read_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_assignments(parser.items("run"))


def resolve(config_path=None, overrides=None) -> RunConfig:
    values = {}
    if config_path is not None:
        values.update(read_config_file(config_path))
    if overrides:
        values.update(overrides)
    cfg = dataclasses.replace(RunConfig(), **values)
    return cfg.validate()
