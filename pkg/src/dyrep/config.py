"""Flat run configuration with dotted keys, loaded from YAML plus ``key=value`` overrides.

Precedence is override > file > default. Every key a run uses is listed in
:data:`DEFAULTS`; anything else is rejected by name.
"""

from dataclasses import dataclass
from pathlib import Path

import yaml

from .data import CIFAR_MEAN, CIFAR_STD, DatasetSource
from .grow_prune import DepConfig, GrowConfig
from .models import ModelSpec
from .trainer import TrainConfig, config_hash

DEFAULTS = {
    "seed": 0,
    "epochs": 40,
    "t": 5,
    "lr": 0.1,
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "batch_size": 128,
    "eval_batch_size": 500,
    "metric": "synflow",
    "synflow_abs": False,
    "precision": "double",
    "augment": False,
    "dyrep": True,
    "checkpoint_every": 0,
    "grow.gamma_init": 0.01,
    "grow.calib_batches": 20,
    "grow.branch_kinds": ["kxk", "1x1", "1x1_kxk", "1x1_avg", "1xk", "kx1", "residual"],
    "grow.max_rep_depth": 2,
    "dep.lambda": 0.02,
    "model.family": "vgg_like",
    "model.widths": [16, 32, 64],
    "model.blocks": [1, 1, 1],
    "model.kernel_size": 3,
    "data.kind": "synthetic",
    "data.path": None,
    "data.seed": 0,
    "data.train_size": 5000,
    "data.test_size": 1000,
    "data.num_classes": 10,
    "data.shape": [3, 16, 16],
    "data.snr": 0.15,
    "data.mean": list(CIFAR_MEAN),
    "data.std": list(CIFAR_STD),
}


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _check_keys(values, origin):
    for k in values:
        if k not in DEFAULTS:
            raise ConfigError(f"unknown config key {k!r} in {origin}", key=k)


def _coerce(key, value):
    # YAML 1.1 reads "1e-4" as a string, so numbers are normalized against the default's type
    default = DEFAULTS[key]
    if default is None or value is None or isinstance(default, (list, str)):
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
        elif isinstance(default, int):
            if not isinstance(value, bool) and float(value) == int(float(value)):
                return int(float(value))
        elif not isinstance(value, bool):
            return float(value)
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"config key {key!r} expects {type(default).__name__}, got {value!r}", key=key)


def parse_override(item):
    """``"grow.gamma_init=0.05"`` -> ``("grow.gamma_init", 0.05)``; values parse as YAML scalars."""
    key, sep, raw = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {item!r} must look like key=value")
    return key, yaml.safe_load(raw) if raw.strip() else None


def load_file(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text()) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping of keys to values")
    values = _flatten(doc)
    _check_keys(values, str(path))
    return values


def resolve(path=None, overrides=()):
    """Defaults, then file values, then ``key=value`` overrides."""
    values = dict(DEFAULTS)
    if path is not None:
        values.update(load_file(path))
    parsed = dict(parse_override(o) if isinstance(o, str) else o for o in overrides)
    _check_keys(parsed, "overrides")
    values.update(parsed)
    return {k: _coerce(k, v) for k, v in values.items()}


@dataclass
class RunConfig:
    train: TrainConfig
    model: ModelSpec
    data: DatasetSource
    checkpoint_every: int
    values: dict

    @property
    def hash(self):
        return config_hash(self.values)


def build(values) -> RunConfig:
    """Typed configuration objects from a resolved flat mapping."""
    v = values
    try:
        data = DatasetSource(kind=v["data.kind"], path=v["data.path"], seed=v["data.seed"],
                             train_size=v["data.train_size"], test_size=v["data.test_size"],
                             num_classes=v["data.num_classes"], shape=v["data.shape"], snr=v["data.snr"],
                             mean=v["data.mean"], std=v["data.std"])
        shape = (3, 32, 32) if data.kind == "cifar10_binary" else data.shape
        model = ModelSpec(family=v["model.family"], widths=v["model.widths"], blocks=v["model.blocks"],
                          num_classes=data.num_classes, input_shape=shape,
                          kernel_size=v["model.kernel_size"])
        grow = GrowConfig(gamma_init=v["grow.gamma_init"], calib_batches=v["grow.calib_batches"],
                          branch_kinds=tuple(v["grow.branch_kinds"]), max_rep_depth=v["grow.max_rep_depth"])
        train = TrainConfig(epochs=v["epochs"], t=v["t"], lr=v["lr"], momentum=v["momentum"],
                            weight_decay=v["weight_decay"], batch_size=v["batch_size"], seed=v["seed"],
                            metric=v["metric"], synflow_abs=v["synflow_abs"], precision=v["precision"],
                            augment=v["augment"], dyrep=v["dyrep"], eval_batch_size=v["eval_batch_size"],
                            grow=grow, dep=DepConfig(lam=v["dep.lambda"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    return RunConfig(train, model, data, int(v["checkpoint_every"]), dict(v))
