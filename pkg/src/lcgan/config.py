"""Run configuration: JSON with sections data / model / loss / optim / run.

A missing file means "use the desk-scale defaults below"; a partial file is
merged over them. Unknown keys are rejected.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Optional

DEFAULT_CONFIG = {
    "data": {
        "root": None,
        "size": 64,
        "n_train": 400,
        "n_test": 100,
        "seed": 0,
    },
    "model": {
        "segmentor": {
            "stem_width": 16, "stem_stride": 1, "stage_widths": [32, 48, 64], "low_level_stage": 0,
            "aspp_rates": [1, 2, 4], "aspp_width": 32, "low_level_width": 16, "decoder_width": 32,
        },
        "generator_F": {"base_width": 16, "n_residual_blocks": 3},
        "generator_G": {"aspp_rates": [1, 2, 4], "aspp_width": 32, "low_level_width": 16,
                        "decoder_widths": [32, 16]},
        "discriminator": {"widths": [16, 32, 64], "strides": [2, 2, 1, 1], "kernel": 4},
    },
    "loss": {
        "lambda_cyc": 5.0, "lambda_ssim": 1.0, "lambda_seg": 2.0,
        "gamma": [0.0, 0.05, 0.33, 0.35, 0.27], "n_scales": 4, "eps": 1e-4,
    },
    "optim": {
        "lr": 8e-5, "beta1": 0.5, "beta2": 0.999, "eps": 1e-8, "constant_fraction": 0.5,
        "seg_lr": 2e-3, "seg_beta1": 0.9, "seg_epochs": 30, "seg_batch": 8, "seg_val_fraction": 0.1,
    },
    "run": {
        "iterations": 3000, "seed": 0, "seeds": [0, 1, 2], "buffer_capacity": 50,
        "log_every": 50, "checkpoint_every": 500,
        "ssim_on": True, "seg_on": True, "trained_backbone_on": True,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: Optional[str] = None) -> dict:
    """Defaults merged with the JSON file at ``path`` (``None``/``"default"`` = defaults only)."""
    if path is None or path == "default":
        return copy.deepcopy(DEFAULT_CONFIG)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        with open(p) as fh:
            user = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return _merge(DEFAULT_CONFIG, user)


def apply_overrides(config: dict, overrides: dict) -> dict:
    """``{"run.iterations": 10}`` style dotted overrides."""
    nested: dict = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        cur = nested
        parts = dotted.split(".")
        for part in parts[:-1]:
            cur = cur.setdefault(part, {})
        cur[parts[-1]] = value
    return _merge(config, nested)


def write_snapshot(config: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    with open(path, "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
