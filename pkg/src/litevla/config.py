"""Run configuration: built-in defaults < JSON config file < command-line flags."""

from __future__ import annotations

import copy
import json
from pathlib import Path

DEFAULTS: dict = {
    "seed": 0,
    "vocab": {"v_bins": 32, "w_bins": 32, "v_range": [-0.5, 0.5], "w_range": [-1.5, 1.5]},
    "model": {"d_g": 8, "d_tok": 8, "d_h": 32, "image": [16, 16]},
    "data": {"episodes": 150},
    "train": {
        "learning_rate": 0.15,
        "epochs": 40,
        "batch_size": 16,
        "weight_decay": 1e-3,
        "lora_rank": 8,
        "lora_alpha": 8.0,
        "dagger_rounds": 2,
        "dagger_episodes": 75,
        "dagger_epochs": 15,
    },
    "decode": {"max_tokens": 12, "n_ctx": 512},
    "episode": {
        "controller_dt": 0.01,
        "reasoning_period": 0.1505,
        "max_duration": 30.0,
        "success_radius": 0.1,
        "goal_shift_time": None,
        "staleness_limit": None,
        "n_targets": 3,
    },
    "eval": {"episodes": 100, "seed_offset": 10000},
    "bench": {"runs": 300, "warmup": 10},
    "compare": {"observations": 1000, "observation_seed_offset": 50000, "agreement_threshold": 0.90, "max_success_drop_pp": 10.0},
}


class ConfigError(ValueError):
    pass


def deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = deep_merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = deep_merge(cfg, data)
    return deep_merge(cfg, overrides or {})


def set_dotted(cfg: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = cfg
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value
