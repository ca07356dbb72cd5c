"""TOML experiment configs: parsing, validation, canonical text and hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .aggregation import AwaOptions
from .model import TrainConfig
from .orchestrator import ConfigError, DataConfig, ExperimentConfig

_RUN_KEYS = ("strategy", "rounds", "clients", "participation", "master_seed", "eval_every", "disco_a", "disco_b")
_MODEL_KEYS = ("hidden", "activation")

_DOCS = {
    "run.strategy": "fedavg | fedprox | feddisco | ldawa | fedawa | fedawa_l | fedawa_cos",
    "run.rounds": "communication rounds T",
    "run.clients": "number of clients K",
    "run.participation": "fraction R of clients sampled per round, in (0, 1]",
    "run.master_seed": "root of every random stream (data, partition, init, sampling, local SGD)",
    "run.eval_every": "evaluate the global model every N rounds",
    "run.disco_a": "feddisco discrepancy coefficient",
    "run.disco_b": "feddisco additive shift",
    "model.hidden": "hidden layer widths of the MLP",
    "model.activation": "relu | tanh",
    "data.source": "blobs | idx | csv",
    "data.classes": "number of classes C",
    "data.dims": "blob feature dimension",
    "data.n_per_class": "blob training samples per class",
    "data.n_test_per_class": "blob test samples per class",
    "data.spread": "blob standard deviation (means sit at 3 x spread)",
    "data.partitioner": "dirichlet | extreme_groups",
    "data.alpha": "Dirichlet concentration; smaller is more heterogeneous",
    "data.min_samples": "minimum samples per client",
    "data.train_images": "IDX training images (source = idx)",
    "data.train_labels": "IDX training labels (source = idx)",
    "data.test_images": "IDX test images (source = idx)",
    "data.test_labels": "IDX test labels (source = idx)",
    "data.train_csv": "training CSV with header label,f0,f1,... (source = csv)",
    "data.test_csv": "test CSV (source = csv)",
    "train.initial_lr": "local learning rate in round 1",
    "train.lr_decay": "per-round multiplicative decay of the local learning rate",
    "train.momentum": "SGD momentum",
    "train.weight_decay": "coupled L2 weight decay",
    "train.local_epochs": "local epochs E per round",
    "train.batch_size": "mini-batch size (last partial batch kept)",
    "train.prox_mu": "proximal coefficient; fedprox uses 0.01 when left at 0",
    "awa.steps": "gradient steps of the weight optimizer",
    "awa.step_size": "step size on the softmax logits",
    "awa.reg_kind": "none | euclid | cosine",
    "awa.reg_coeff": "weight of the global-alignment regularizer",
    "awa.warm_start": "start from the previous round's weights instead of dataset sizes",
}


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    name = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(name, f"expected a list of integers, got {value!r}")
        return tuple(value)
    return value


def _section(raw: dict, section: str, keys: tuple[str, ...], defaults: dict) -> dict:
    table = raw.get(section, {})
    if not isinstance(table, dict):
        raise ConfigError(section, "must be a table")
    unknown = sorted(set(table) - set(keys))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}", "unknown key")
    return {k: _coerce(section, k, table[k], defaults[k]) for k in keys if k in table}


def _defaults(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def _build(section: str, cls, kw: dict):
    try:
        return cls(**kw)
    except ValueError as exc:
        # constructor messages start with the offending field name
        raise ConfigError(f"{section}.{str(exc).split(' ', 1)[0]}", str(exc)) from None


def from_dict(raw: dict) -> ExperimentConfig:
    unknown = sorted(set(raw) - {"run", "model", "data", "train", "awa"})
    if unknown:
        raise ConfigError(unknown[0], "unknown section")
    base = ExperimentConfig()
    top = _defaults(base)
    run = _section(raw, "run", _RUN_KEYS, top)
    model = _section(raw, "model", _MODEL_KEYS, top)
    data_kw = _section(raw, "data", tuple(_defaults(DataConfig())), _defaults(DataConfig()))
    train_kw = _section(raw, "train", tuple(_defaults(TrainConfig())), _defaults(TrainConfig()))
    awa_kw = _section(raw, "awa", tuple(_defaults(AwaOptions())), _defaults(AwaOptions()))
    train = _build("train", TrainConfig, train_kw)
    awa = _build("awa", AwaOptions, awa_kw)
    return ExperimentConfig(**run, **model, data=DataConfig(**data_kw), train=train, awa=awa)


def to_dict(cfg: ExperimentConfig) -> dict:
    top = _defaults(cfg)
    return {
        "run": {k: top[k] for k in _RUN_KEYS},
        "model": {"hidden": list(cfg.hidden), "activation": cfg.activation},
        "data": _defaults(cfg.data),
        "train": _defaults(cfg.train),
        "awa": _defaults(cfg.awa),
    }


def _sorted(d: dict) -> dict:
    return {k: _sorted(v) if isinstance(v, dict) else v for k, v in sorted(d.items())}


def emit(cfg: ExperimentConfig) -> str:
    """Canonical TOML text: every key present, sections and keys sorted."""
    return tomli_w.dumps(_sorted(to_dict(cfg)))


def parse(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"not valid TOML: {exc}") from None
    return from_dict(raw)


def load(path: str | Path) -> ExperimentConfig:
    return parse(Path(path).read_text())


def canonicalize(cfg: ExperimentConfig) -> str:
    return emit(cfg)


def content_hash(cfg: ExperimentConfig) -> str:
    """Git blob-style SHA-1 of the canonical config text."""
    body = canonicalize(cfg).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def schema_text() -> str:
    lines = []
    for section, values in to_dict(ExperimentConfig()).items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            rendered = f"{key} = {json.dumps(value)}"
            lines.append(f"{rendered:<40} # {_DOCS.get(f'{section}.{key}', '')}")
        lines.append("")
    return "\n".join(lines)
