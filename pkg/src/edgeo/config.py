"""Run configuration: a JSON document with six sections, every key defaulted.

Unknown keys are rejected. ``apply_override("cem.kernel_length=15")`` style
dotted overrides parse the value as JSON and fall back to a bare string.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {
        "n_objects": 6,
        "aspect_range": [1.0, 3.5],
        "elongated_fraction": 0.5,
        "side_range": [20.0, 48.0],
        "rotations": [0.0, 90.0, 15.0, -15.0],
        "scale_range": [0.8, 1.25],
        "center_jitter": 24.0,
        "min_visible": 0.6,
        "query_size": [128, 128],
        "reference_size": [256, 256],
        "palette_size": 12,
        "seed": 0,
        "max_retries": 50,
        "n_train": 256,
        "n_val": 64,
        "train_dir": None,
        "val_dir": None,
    },
    "model": {
        "backbone": "tiny",
        "widths": [16, 32, 64, 128],
        "out_channels": 128,
        "downsample_factor": 16,
        "nonlinearity": "silu",
        "anchors": "auto",
        "n_anchors": 9,
        "decode": "exp",
    },
    "cem": {
        "enabled": True,
        "kernel_length": 11,
        "nonlinearity": None,
    },
    "posenc": {
        "mode": "mpe",
        "alpha_min": 0.005,
        "alpha_max": 0.5,
        "provider": "synthetic",
        "command": None,
        "fallback_to_kpe": True,
    },
    "train": {
        "optimizer": "rmsprop",
        "lr": 0.0001,
        "lr_schedule": "constant",
        "rmsprop_alpha": 0.99,
        "momentum": 0.0,
        "weight_decay": 0.0,
        "batch_size": 12,
        "epochs": 25,
        "seed": 0,
        "reduction": "sum",
        "neg_weight": 1.0,
        "grad_clip": None,
        "augment": True,
        "checkpoint_every": 0,
        "eval_thresholds": [0.25, 0.5],
        "eval_batch_size": 16,
        "threads": 1,
    },
    "experiment": {
        "shifts": [0, 4, 8, 16],
        "kernel_sizes": [7, 9, 11, 13, 15, 17],
        "shift_retries": 100,
        "split": "val",
        "run_root": None,
    },
}

# Keys each subcommand reads, for --help.
SECTIONS_READ = {
    "gen-data": ("data",),
    "train": ("data", "model", "cem", "posenc", "train"),
    "eval": ("data", "posenc", "train"),
    "robustness": ("data", "model", "cem", "posenc", "train", "experiment"),
    "ablation": ("data", "model", "cem", "posenc", "train", "experiment"),
    "kernel-sweep": ("data", "model", "cem", "posenc", "train", "experiment"),
    "visualize": ("data", "posenc", "train", "experiment"),
    "anchors": ("data", "train"),
}

_CHOICES = {
    ("model", "backbone"): ("tiny", "resnet18", "darknet53"),
    ("model", "decode"): ("exp", "additive"),
    ("model", "nonlinearity"): ("silu", "relu", "leaky_relu"),
    ("cem", "nonlinearity"): (None, "relu", "silu", "gelu"),
    ("posenc", "mode"): ("kpe", "mpe"),
    ("posenc", "provider"): ("synthetic", "external"),
    ("train", "optimizer"): ("rmsprop",),
    ("train", "lr_schedule"): ("constant", "cosine"),
    ("train", "reduction"): ("sum", "mean"),
    ("experiment", "split"): ("train", "val"),
}


class ConfigError(ValueError):
    pass


def _check_type(path: str, default: Any, value: Any) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
    elif isinstance(default, str):
        # "anchors" may be the string "auto" or an explicit list
        if not isinstance(value, str) and not (path == "model.anchors" and isinstance(value, list)):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def merge(user: dict[str, Any] | None) -> dict[str, Any]:
    """Overlay ``user`` on the defaults, rejecting unknown sections and keys."""
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in (user or {}).items():
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key, value in values.items():
            set_key(cfg, f"{section}.{key}", value)
    validate(cfg)
    return cfg


def set_key(cfg: dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    if len(parts) != 2 or parts[0] not in DEFAULTS:
        raise ConfigError(f"unknown config key {dotted!r}")
    section, key = parts
    if key not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key {dotted!r}")
    cfg[section][key] = _check_type(dotted, DEFAULTS[section][key], value)


def apply_override(cfg: dict[str, Any], assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form section.key=value")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    set_key(cfg, dotted.strip(), value)


def validate(cfg: dict[str, Any]) -> None:
    for (section, key), allowed in _CHOICES.items():
        if cfg[section][key] not in allowed:
            raise ConfigError(f"{section}.{key}: {cfg[section][key]!r} not in {allowed}")
    k = cfg["cem"]["kernel_length"]
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"cem.kernel_length must be odd, got {k}")
    for ks in cfg["experiment"]["kernel_sizes"]:
        if not isinstance(ks, int) or ks < 1 or ks % 2 == 0:
            raise ConfigError(f"experiment.kernel_sizes must be odd integers, got {ks!r}")
    t = cfg["train"]
    if t["batch_size"] < 1 or t["epochs"] < 1:
        raise ConfigError("train.batch_size and train.epochs must be >= 1")
    if t["lr"] <= 0:
        raise ConfigError("train.lr must be positive")
    anchors = cfg["model"]["anchors"]
    if anchors != "auto":
        if not isinstance(anchors, list) or not all(isinstance(a, list) and len(a) == 2 for a in anchors):
            raise ConfigError("model.anchors must be 'auto' or a list of [w, h] pairs")
    if not 0 < cfg["posenc"]["alpha_min"] <= cfg["posenc"]["alpha_max"] <= 1:
        raise ConfigError("posenc bounds must satisfy 0 < alpha_min <= alpha_max <= 1")


def load(path: str | Path | None, overrides: list[str] = (), seed: int | None = None) -> dict[str, Any]:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
    cfg = merge(user)
    for o in overrides:
        apply_override(cfg, o)
    if seed is not None:
        cfg["data"]["seed"] = seed
        cfg["train"]["seed"] = seed
    validate(cfg)
    return cfg


def canonical_json(cfg: dict[str, Any]) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict[str, Any]) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:12]


def describe_keys(sections: tuple[str, ...]) -> str:
    lines = []
    for s in sections:
        for k, v in DEFAULTS[s].items():
            lines.append(f"  {s}.{k} = {json.dumps(v)}")
    return "\n".join(lines)
