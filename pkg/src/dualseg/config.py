"""Run configuration: one nested key tree, strict keys, dotted overrides.

Every tunable lives here with a default; loading a file merges user values
over the defaults and rejects unknown keys, so a run snapshot always
contains the complete, explicit configuration.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any

import yaml


class ConfigError(Exception):
    """Invalid configuration: unknown key, bad type, or bad value."""


DEFAULTS: dict[str, Any] = {
    "seed": 42,
    "model": {
        "num_classes": 6,
        "background_id": None,  # None -> last class id
    },
    "backbone": {
        "depth": 8,
        "embed_dim": 64,
        "num_heads": 4,
        "patch_size": 8,
        "tap_indices": [2, 4, 6, 8],
        "aux_channels": 1,
        "rgb_channels": 3,
        "mlp_ratio": 4.0,
        "family": "dinov2-like",  # or "sam-like": no ImageNet standardization
        "weight_file": None,
    },
    "cpia": {
        "enabled": True,
        "r_p": 0.25,
        "r_a": 0.25,
        "dropout": 0.1,
    },
    "dgfm": {
        "enabled": True,
        "reduction": 4,
        "groups": 8,
    },
    "mcrm": {
        "enabled": True,
        "ratio": 0.5,
        "regions": 3,
        "area_min": 0.02,
        "area_max": 0.15,
        "aspect_min": 0.5,
        "aspect_max": 2.0,
    },
    "loss": {
        "lambda_aux": 0.4,
        "ignore_index": None,
    },
    "decoder": {
        "channels": 64,
        "ppm_bins": [1, 2, 4],
    },
    "data": {
        "root": None,  # None -> synthetic dataset
        "crop": 64,
        "synthetic": {
            "tiles_train": 8,
            "tiles_test": 4,
            "tile_size": 64,
            "mode": "joint",  # rgb_only | aux_only | joint
            "region_cells": 4,
            "rgb_noise": 0.3,
            "dsm_noise": 0.01,
        },
    },
    "schedule": {
        "base_lr": 3.0e-4,
        "lr_min": 0.0,
        "weight_decay": 0.01,
        "warmup_epochs": 5,
        "epochs": 20,
        "steps_per_epoch": 50,
        "batch_size": 8,
        "eval_every": 5,  # epochs between eval passes; 0 -> final epoch only
    },
    "eval": {
        "crop": 64,
        "stride": 64,
    },
}


def default_config() -> dict[str, Any]:
    return copy.deepcopy(DEFAULTS)


def _merge(defaults: dict[str, Any], user: dict[str, Any], path: str) -> dict[str, Any]:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be a section, got {type(value).__name__}")
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = _coerce(defaults[key], value, here)
    return out


def _coerce(default: Any, value: Any, path: str) -> Any:
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list, got {value!r}")
        return list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    return value


def load_config(path: str | Path | None = None) -> dict[str, Any]:
    """Defaults merged with an optional YAML file; unknown keys are errors."""
    if path is None:
        return default_config()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    loaded = yaml.safe_load(p.read_text()) or {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"config root must be a mapping: {p}")
    return _merge(DEFAULTS, loaded, "")


def apply_overrides(config: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` strings (values parsed as YAML scalars)."""
    out = copy.deepcopy(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
        node = out
        node_defaults = DEFAULTS
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                raise ConfigError(f"unknown config section: {dotted}")
            node = node[k]
            node_defaults = node_defaults[k]
        leaf = keys[-1]
        if leaf not in node_defaults:
            raise ConfigError(f"unknown config key: {dotted}")
        node[leaf] = _coerce(node_defaults[leaf], value, dotted)
    return out


def snapshot_yaml(config: dict[str, Any]) -> str:
    return yaml.safe_dump(config, sort_keys=True, default_flow_style=None)


def validate_config(config: dict[str, Any]) -> None:
    """Cross-field checks that individual key coercion cannot see."""
    bb = config["backbone"]
    if config["data"]["crop"] % bb["patch_size"] != 0:
        raise ConfigError(
            f"data.crop {config['data']['crop']} must be divisible by patch size {bb['patch_size']}"
        )
    if config["eval"]["crop"] % bb["patch_size"] != 0:
        raise ConfigError(
            f"eval.crop {config['eval']['crop']} must be divisible by patch size {bb['patch_size']}"
        )
    if config["eval"]["stride"] > config["eval"]["crop"]:
        raise ConfigError("eval.stride must not exceed eval.crop")
    if not 0.0 <= config["mcrm"]["ratio"] <= 1.0:
        raise ConfigError(f"mcrm.ratio must be in [0, 1], got {config['mcrm']['ratio']}")
    if config["loss"]["lambda_aux"] < 0:
        raise ConfigError("loss.lambda_aux must be >= 0")
    if config["model"]["num_classes"] < 2:
        raise ConfigError("model.num_classes must be >= 2")
    mode = config["data"]["synthetic"]["mode"]
    if mode not in ("rgb_only", "aux_only", "joint"):
        raise ConfigError(f"data.synthetic.mode must be rgb_only|aux_only|joint, got {mode!r}")
    family = bb["family"]
    if family not in ("dinov2-like", "sam-like"):
        raise ConfigError(f"backbone.family must be dinov2-like|sam-like, got {family!r}")
