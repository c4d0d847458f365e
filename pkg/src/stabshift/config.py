"""Plain-text experiment configuration (INI sections ``[experiment]`` and ``[train]``).

Every field of :class:`ExperimentConfig` and :class:`TrainConfig` can be set;
unknown sections or keys are errors. Lists are comma separated.
"""

from __future__ import annotations

import configparser
from dataclasses import fields, replace
from pathlib import Path

from .errors import ConfigError
from .experiment import ExperimentConfig
from .surrogate import TrainConfig


def _tuple_of(conv):
    return lambda s: tuple(conv(x.strip()) for x in s.split(",") if x.strip())


def _optional(conv):
    return lambda s: None if s.strip().lower() in ("", "none") else conv(s)


def _bandwidth(s: str):
    return "median" if s.strip() == "median" else float(s)


EXPERIMENT_KEYS = {
    "system": str,
    "family": _optional(str),
    "regimes": _tuple_of(str),
    "deltas": _tuple_of(float),
    "n_train": int,
    "n_holdout": int,
    "n_test": int,
    "stable_ratio": float,
    "runs": int,
    "alpha": float,
    "methods": _tuple_of(str),
    "n_perm": int,
    "seed": int,
    "dt": float,
    "t_end": float,
    "time_stride": int,
    "type1_delta": float,
    "type2_delta": float,
    "workers": int,
}

# ini key -> (field name, converter)
TRAIN_KEYS = {
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "lr": ("lr", float),
    "lambda": ("lam", float),
    "omega": ("omega", float),
    "tau": ("tau", _optional(float)),
    "bandwidth": ("bandwidth", _bandwidth),
    "seed": ("seed", int),
    "recon_weight": ("recon_weight", float),
    "hidden_dim": ("hidden_dim", int),
    "depth": ("depth", int),
    "latent_dim": ("latent_dim", int),
    "feed": ("feed", str),
}

assert set(EXPERIMENT_KEYS) == {f.name for f in fields(ExperimentConfig)} - {"train"}
assert {v[0] for v in TRAIN_KEYS.values()} == {f.name for f in fields(TrainConfig)}


def _convert(section: str, key: str, raw: str, conv):
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def config_from_sections(sections: dict[str, dict[str, str]], base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    unknown = set(sections) - {"experiment", "train"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    exp_kw, train_kw = {}, {}
    for key, raw in sections.get("experiment", {}).items():
        if key not in EXPERIMENT_KEYS:
            raise ConfigError(f"unknown key [experiment] {key}")
        exp_kw[key] = _convert("experiment", key, raw, EXPERIMENT_KEYS[key])
    for key, raw in sections.get("train", {}).items():
        if key not in TRAIN_KEYS:
            raise ConfigError(f"unknown key [train] {key}")
        name, conv = TRAIN_KEYS[key]
        train_kw[name] = _convert("train", key, raw, conv)
    return replace(base, train=replace(base.train, **train_kw), **exp_kw)


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keys are case sensitive
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_sections({s: dict(parser[s]) for s in parser.sections()}, base)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = ["[experiment]"]
    lines += [f"{k} = {_fmt(getattr(cfg, k))}" for k in EXPERIMENT_KEYS]
    lines += ["", "[train]"]
    lines += [f"{k} = {_fmt(getattr(cfg.train, name))}" for k, (name, _) in TRAIN_KEYS.items()]
    return "\n".join(lines) + "\n"


def write_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
