"""Experiment configuration: TOML files with a fixed, flat ``section.key`` schema.

Every key has a default in :data:`DEFAULTS`; a config file only lists what it
changes. ``--set section.key=value`` overrides are parsed as TOML literals,
so ``--set dcr.num_negatives=5`` gives an int and ``--set dcr.degradation_policy=mix``
a string.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import tomli

from .errors import ConfigError

DEFAULTS = {
    "name": "dckd",
    "seed": 0,
    "data": {
        "train_count": 64,
        "eval_count": 8,
        "image_size": 64,
        "scale": 2,
        "train_seed": 1000,
        "eval_seed": 2000,
    },
    "model": {
        "student_width": 8,
        "student_depth": 2,
        "teacher_width": 32,
        "teacher_depth": 4,
        "residual": False,
    },
    "teacher": {
        "pretrain_iterations": 8000,
        "lr": 2e-3,
        "checkpoint": "",
    },
    "train": {
        "total_iterations": 5000,
        "batch_size": 8,
        "patch_size": 16,
        "lr": 1e-3,
        "lr_decay": 0.5,
        "lr_milestones": [0.6, 0.8],
        "checkpoint_every": 0,
        "dtype": "float32",
    },
    "loss": {
        "lambda_kd": 1.0,
        "lambda_dcl": 0.1,
        "lambda_ce": 0.001,
    },
    "dcr": {
        "alpha": 0.1,
        "num_negatives": 5,
        "initial_step": 1000,
        "step_growth": 2.0,
        "step_cap": 0,
        "eps": 1e-8,
        "degradation_policy": "noise",
    },
    "degradation": {
        "blur_sigma": [0.5, 2.0],
        "noise_sigma": [5 / 255, 30 / 255],
        "resize_scale": [0.5, 0.9],
    },
    "dmm": {
        "temperature": 1.0,
        "distance_sign": "negated",
        "codebook_path": "",
        "encoder_path": "",
    },
    "eval": {
        "channel_mode": "Y",
    },
}

CHOICES = {
    "dcr.degradation_policy": ("blur", "noise", "resize", "mix"),
    "dmm.distance_sign": ("negated", "literal"),
    "eval.channel_mode": ("Y", "RGB"),
    "train.dtype": ("float32", "float64"),
}
NONNEGATIVE = {"loss.lambda_kd", "loss.lambda_dcl", "loss.lambda_ce", "dcr.step_cap", "train.checkpoint_every",
               "teacher.pretrain_iterations", "dcr.eps"}


def flatten(cfg, prefix=""):
    out = {}
    for k, v in cfg.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def get(cfg, key):
    node = cfg
    for part in key.split("."):
        node = node[part]
    return node


def set_key(cfg, key, value):
    flat_defaults = flatten(DEFAULTS)
    if key not in flat_defaults:
        raise ConfigError(f"unknown config key {key!r}")
    *parents, leaf = key.split(".")
    node = cfg
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    return key.strip(), parse_value(value.strip())


def _merge(base, new, prefix=""):
    for k, v in new.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{key!r} must be a table")
            _merge(base[k], v, key + ".")
        else:
            base[k] = v


def validate(cfg):
    errors = []
    flat, defaults = flatten(cfg), flatten(DEFAULTS)
    for key, default in defaults.items():
        value = flat.get(key)
        if isinstance(default, bool) != isinstance(value, bool):
            errors.append(f"{key}: expected {type(default).__name__}, got {value!r}")
        elif isinstance(default, float) and not isinstance(value, (int, float)):
            errors.append(f"{key}: expected a number, got {value!r}")
        elif isinstance(default, int) and not isinstance(default, bool) and not isinstance(value, int):
            errors.append(f"{key}: expected an integer, got {value!r}")
        elif isinstance(default, str) and not isinstance(value, str):
            errors.append(f"{key}: expected a string, got {value!r}")
        elif isinstance(default, list) and (not isinstance(value, list) or len(value) != len(default)
                                            and key != "train.lr_milestones"):
            errors.append(f"{key}: expected a list like {default!r}, got {value!r}")
        elif key in CHOICES and value not in CHOICES[key]:
            errors.append(f"{key}: must be one of {CHOICES[key]}, got {value!r}")
        elif isinstance(value, (int, float)) and not isinstance(value, bool) and key != "seed" \
                and not key.endswith("_seed"):
            if key in NONNEGATIVE:
                if value < 0:
                    errors.append(f"{key}: must be >= 0, got {value!r}")
            elif key == "dcr.alpha":
                if not 0 <= value <= 1:
                    errors.append(f"{key}: must lie in [0, 1], got {value!r}")
            elif key == "dcr.step_growth":
                if value < 1:
                    errors.append(f"{key}: must be >= 1, got {value!r}")
            elif value <= 0:
                errors.append(f"{key}: must be positive, got {value!r}")
    if not errors:
        if flat["data.image_size"] % flat["data.scale"]:
            errors.append("data.image_size: must be divisible by data.scale")
        if flat["train.patch_size"] > flat["data.image_size"] // flat["data.scale"]:
            errors.append("train.patch_size: larger than the LQ images")
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                _merge(cfg, tomli.load(fh))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        set_key(cfg, key, value)
    return validate(cfg)


def config_digest(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def dump_toml(cfg) -> str:
    """Minimal TOML writer for this schema (scalars, flat lists, one level of tables)."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, list):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    lines = [f"{k} = {fmt(v)}" for k, v in cfg.items() if not isinstance(v, dict)]
    for k, v in cfg.items():
        if isinstance(v, dict):
            lines += ["", f"[{k}]"] + [f"{kk} = {fmt(vv)}" for kk, vv in v.items()]
    return "\n".join(lines) + "\n"


def shipped_config(name: str) -> Path:
    """Path of a config in the repository's ``configs/`` directory."""
    return Path(__file__).resolve().parents[2] / "configs" / name
