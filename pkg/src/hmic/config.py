"""Pipeline configuration: TOML file, command-line overrides and run records."""

from __future__ import annotations

import copy
import hashlib
import json
import os
import sys
import time
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigurationError

DEFAULTS = {
    "seed": 0,
    "workers": None,
    "paths": {
        "slides": "slides",
        "labels": "labels.csv",
        "patches": "patches",
        "models": "models",
        "reports": "reports",
        "runs": "runs",
    },
    "patching": {"patch_size": 1000, "stride": None, "test_fraction": 0.3},
    "filter": {"epochs": 10, "batch_size": 32, "alpha": 1e-3, "override": None},
    "stain": {
        "parent": "color_balance",
        "child": "stain_normalize",
        "flat": "none",
        "cb_percent": 10.0,
        "reference": None,
        "lambda": 0.1,
    },
    "train": {
        "input_size": 1000,
        "pools": None,
        "alpha": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
        "batch_size": 32,
        "epochs": 20,
        "pool_dropout": 0.25,
        "dense_dropout": 0.5,
        "early_stop": False,
        "patience": 3,
        # per-level overrides of the keys above
        "parent": {},
        "child": {},
        "flat-cnn": {},
        "flat-mlp": {},
    },
    "predict": {"gating": "slide"},
}

STAIN_MODES = ("color_balance", "stain_normalize", "none")
LEVELS = ("parent", "child", "flat-cnn", "flat-mlp")
TRAIN_KEYS = tuple(k for k in DEFAULTS["train"] if k not in LEVELS)


def _merge(base, override, where=""):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in out:
            raise ConfigurationError(f"unknown config key {where + k!r}")
        if isinstance(out[k], dict) and not out[k] and where == "train.":
            bad = sorted(set(v) - set(TRAIN_KEYS)) if isinstance(v, dict) else [k]
            if bad:
                raise ConfigurationError(f"unknown config key(s) under train.{k}: {bad}")
            out[k] = dict(v)
        elif isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigurationError(f"config key {where + k!r} must be a table")
            out[k] = _merge(out[k], v, where + k + ".")
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=None) -> dict:
    """Defaults, then the TOML file, then ``overrides`` (dotted keys -> values)."""
    cfg = copy.deepcopy(DEFAULTS)
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        cfg = _merge(cfg, data)
        base_dir = path.resolve().parent
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node[k]
        if keys[-1] not in node:
            raise ConfigurationError(f"unknown config key {dotted!r}")
        node[keys[-1]] = value
    for k, v in cfg["paths"].items():
        if v is not None and not os.path.isabs(v):
            cfg["paths"][k] = str(base_dir / v)
    validate(cfg)
    return cfg


def validate(cfg):
    for level in ("parent", "child", "flat"):
        if cfg["stain"][level] not in STAIN_MODES:
            raise ConfigurationError(
                f"stain.{level} must be one of {STAIN_MODES}, got {cfg['stain'][level]!r}")
    if cfg["predict"]["gating"] not in ("slide", "patch"):
        raise ConfigurationError("predict.gating must be 'slide' or 'patch'")
    if not 0 <= cfg["stain"]["cb_percent"] <= 100:
        raise ConfigurationError("stain.cb_percent must lie in [0, 100]")


def train_settings(cfg, level) -> dict:
    """Common ``[train]`` settings with the ``[train.<level>]`` overrides applied."""
    base = {k: cfg["train"][k] for k in TRAIN_KEYS}
    base.update(cfg["train"].get(level, {}))
    return base


def config_hash(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def write_run_record(cfg, command, extra=None) -> Path:
    """``runs/<UTC timestamp>.json`` with the effective config, its hash and the seed."""
    runs = Path(cfg["paths"]["runs"])
    runs.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
    path = runs / f"{stamp}.json"
    n = 1
    while path.exists():
        path = runs / f"{stamp}-{n}.json"
        n += 1
    record = {"command": command, "seed": cfg["seed"], "config_sha256": config_hash(cfg),
              "config": cfg, "time_utc": stamp}
    if extra:
        record["result"] = extra
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n",
                    encoding="utf-8")
    return path
