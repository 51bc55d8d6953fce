"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

from .. import perturb
from ..losses import LossConfig

METHODS = ("normal", "noisy_only", "clean_plus_noisy", "stability", "ours")
SEED_ENV = "NOISECURVE_SEED"


class ConfigError(ValueError):
    pass


def _floats(raw):
    return tuple(float(v) for v in raw.split(",") if v.strip())


def _ints(raw):
    return tuple(int(v) for v in raw.split(",") if v.strip())


def _strs(raw):
    return tuple(v.strip() for v in raw.split(",") if v.strip())


def _bool(raw):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


# key -> (attribute path, parser, default)
SCHEMA = {
    "seed": (int, 0),
    "data.generator": (str, "blobs"),
    "data.path": (str, ""),
    "data.classes": (int, 4),
    "data.n_per_class": (int, 200),
    "data.dim": (int, 8),
    "data.spread": (float, 1.0),
    "data.height": (int, 8),
    "data.width": (int, 8),
    "data.channels": (int, 1),
    "data.jitter": (float, 0.1),
    "data.shift": (int, 2),
    "data.test_ratio": (float, 0.5),
    "model.hidden": (_ints, (32, 16)),
    "model.activations": (_strs, ()),
    "train.method": (str, "ours"),
    "train.epochs": (int, 200),
    "train.batch_size": (int, 64),
    "train.lr": (float, 1e-3),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 5e-4),
    "train.milestones": (_floats, (0.3, 0.6, 0.8)),
    "train.lr_decay": (float, 0.2),
    "train.stability_weight": (float, 1.0),
    "train.centroid_mode": (str, "partial"),
    "train.centroid_gamma": (float, 0.9),
    "loss.alpha": (float, 1.0),
    "loss.beta": (float, 1.0),
    "loss.gamma_reg": (float, 1e-3),
    "loss.lambda": (float, 1.0),
    "loss.delta_v": (float, 0.5),
    "loss.delta_d": (float, 5.0),
    "eval.repeats": (int, 10),
    "eval.clamp": (_bool, False),
    "curvature.sigma": (float, 0.5),
    "curvature.t": (float, 1e-2),
    "curvature.K": (int, 20),
    "curvature.repeats": (int, 10),
    "curvature.exact": (_bool, False),
}

_PERTURB_ROOT = re.compile(r"^(noise|eval\.\d+)\.")


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)
    noise: object = None                 # training perturbation
    evals: list = field(default_factory=list)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def method(self) -> str:
        return self.values["train.method"]

    def loss_config(self) -> LossConfig:
        v = self.values
        return LossConfig(v["loss.alpha"], v["loss.beta"], v["loss.gamma_reg"], v["loss.lambda"],
                          v["loss.delta_v"], v["loss.delta_d"])

    def to_text(self) -> str:
        lines = []
        for key in SCHEMA:
            val = self.values[key]
            if isinstance(val, tuple):
                val = ",".join(repr(v) if isinstance(v, float) else str(v) for v in val)
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{key} = {val}")
        if self.noise is not None:
            lines += [f"{k} = {v}" for k, v in perturb.to_flat(self.noise, "noise").items()]
        for i, spec in enumerate(self.evals):
            lines += [f"{k} = {v}" for k, v in perturb.to_flat(spec, f"eval.{i}").items()]
        return "\n".join(lines) + "\n"


def parse(text: str, env=None) -> ExperimentConfig:
    """Parse config text; unknown keys and bad values raise :class:`ConfigError`."""
    raw, pert = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in raw or key in pert:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        if key in SCHEMA:
            raw[key] = val
        elif _PERTURB_ROOT.match(key):
            pert[key] = val
        else:
            raise ConfigError(f"line {lineno}: unknown key {key}")
    values = {}
    for key, (kind, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = kind(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        else:
            values[key] = default
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    cfg = ExperimentConfig(values)
    try:
        if any(k.startswith("noise.") for k in pert):
            cfg.noise = perturb.from_flat({k: v for k, v in pert.items() if k.startswith("noise.")}, "noise")
        idx = sorted({int(k.split(".")[1]) for k in pert if k.startswith("eval.")})
        if idx != list(range(len(idx))):
            raise ConfigError("eval perturbations must be numbered 0..n-1")
        for i in idx:
            sub = {k: v for k, v in pert.items() if k.startswith(f"eval.{i}.")}
            cfg.evals.append(perturb.from_flat(sub, f"eval.{i}"))
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    v = cfg.values
    if cfg.method not in METHODS:
        raise ConfigError(f"train.method must be one of {METHODS}")
    if cfg.method != "normal" and cfg.noise is None:
        raise ConfigError(f"method {cfg.method} needs a training noise spec (noise.*)")
    if v["data.generator"] not in ("blobs", "rings", "textures", "file"):
        raise ConfigError("data.generator must be blobs, rings, textures or file")
    if v["data.generator"] == "file" and not v["data.path"]:
        raise ConfigError("data.generator = file needs data.path")
    if v["train.centroid_mode"] not in ("naive", "momentum", "partial"):
        raise ConfigError("train.centroid_mode must be naive, momentum or partial")
    if not 0.0 <= v["train.centroid_gamma"] < 1.0:
        raise ConfigError("train.centroid_gamma must lie in [0, 1)")
    if v["train.epochs"] < 0 or v["train.batch_size"] < 1 or v["eval.repeats"] < 1:
        raise ConfigError("epochs >= 0, batch_size >= 1 and eval.repeats >= 1 required")
    if not v["model.hidden"]:
        raise ConfigError("model.hidden needs at least one layer width")
    if v["model.activations"] and len(v["model.activations"]) != len(v["model.hidden"]):
        raise ConfigError("model.activations needs one entry per model.hidden layer")
    try:
        cfg.loss_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def default(**overrides) -> ExperimentConfig:
    """Config built from defaults plus ``key=value`` overrides (dots as '__')."""
    lines = [f"{k.replace('__', '.')} = {v}" for k, v in overrides.items()]
    return parse("\n".join(lines), env={})
