"""JSON run configuration with strict keys and ``section.key=value`` overrides."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigError

DEFAULTS: dict = {
    "seed": 0,
    "paths": {
        "data_dir": "data",
        "out_dir": "runs",
        "checkpoint": None,
        "input": None,
    },
    "dataset": {
        "kind": "crack",
        "n_images": 11,
        "tile": 64,
        "variants": 3,
        "val_fraction": 1 / 3,
        "test_widths": [1, 3, 5, 7, 9, 11],
        "test_images": 20,
        "test_size": 512,
        "n_train": 4000,
        "n_test": 1000,
        "scales": [1.0, 2.0],
        "mnist_pad": 0,
    },
    "simulator": {
        "size": 256,
        "width": 3,
        "hurst": 0.7,
        "background_mean": 160.0,
        "background_std": 20.0,
        "dark_mean": 60.0,
        "dark_std": 15.0,
        "pore_count": [5, 15],
        "pore_radius": [2.0, 8.0],
        "blur_sigma": 0.8,
        "roughness": 0.04,
        "width_range": None,
    },
    "network": {
        "channels": [1, 16, 32, 40, 48, 1],
        "head": "sigmoid-map",
    },
    "train": {
        "epochs": 50,
        "initial_lr": 0.001,
        "lr_half_period": 20,
        "batch_size": 11,
        "loss": "weighted-bce",
        "crack_weight": 40.0,
        "pad": 16,
    },
    "evaluation": {
        "aggregation": "micro",
        "threshold": 0.5,
        "pad": 16,
        "factors": [1, 2, 4, 8, 16, 32, 64],
        "n_images": 16,
        "seeds": 5,
        "width": 11,
        "image_size": 512,
        "pyramid_factors": [1],
    },
}


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"configuration key {path!r} must be an object")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_override(cfg: dict, keys: list[str], value) -> None:
    node, base = cfg, DEFAULTS
    for i, k in enumerate(keys):
        if not isinstance(base, dict) or k not in base:
            raise ConfigError(f"unknown configuration key {'.'.join(keys[: i + 1])!r}")
        if i == len(keys) - 1:
            if isinstance(base[k], dict):
                raise ConfigError(f"configuration key {'.'.join(keys)!r} is a section")
            node[k] = value
        else:
            node, base = node[k], base[k]


def load_config(path=None, overrides=()) -> dict:
    """Defaults, updated by the JSON file at ``path``, then by ``overrides``."""
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    cfg = _merge(DEFAULTS, user)
    for item in overrides:
        apply_override(cfg, *parse_override(item))
    return cfg


def write_resolved(cfg: dict, directory, name: str = "resolved_config.json") -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path
