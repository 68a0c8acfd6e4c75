"""Experiment configuration: one JSON file drives every subcommand.

CLI flags override individual fields (dotted paths); the resolved config is
copied into the run's output directory so every artifact is reproducible
from what sits next to it.
"""

from __future__ import annotations

import hashlib
import json
from copy import deepcopy
from pathlib import Path
from typing import Any

DEFAULT_CONFIG: dict[str, Any] = {
    "out_dir": "runs/default",
    "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "model": {
        "image_size": 32, "in_channels": 3, "ch0": 16, "ch1": 32,
        "time_dim": 32, "n_fourier": 8, "ground_hidden": 64, "max_prompt_len": 8,
    },
    "data": {"corpus_size": 2000, "seed": 11},
    "train_base": {
        "base_steps": 4000, "adapter_steps": 3000, "batch": 16,
        "lr": 2e-3, "adapter_lr": 2e-3, "seed": 1,
        "null_prob": 0.1, "rare_prefix_prob": 0.5, "grad_clip": 5.0,
    },
    "concept": {
        "identifier": "sks", "family": "wrench", "texture_seed": 37,
        "n_images": 4, "position": "left", "seed": 5,
    },
    "personalize": {
        "steps": 1000, "batch": 2, "lr": 1e-4, "prior_prob": 0.5,
        "seed": 2, "prior_count": 50, "prior_guidance": 3.0, "grad_clip": 5.0,
    },
    "augment": {"resize_floor": 0.3, "canvas_fill": 0.0, "enabled": True},
    "sample": {"guidance_scale": 5.0, "tau": 0.3, "steps": 50, "seed": 0,
               "clip_x0": True},
    "eval": {
        "n_loc": 100, "n_ablate": 100, "n_per_box": 8, "seed": 9,
        "detector_threshold": 0.3, "collage_train": 250,
    },
}


def load_config(path: str | Path | None) -> dict:
    cfg = deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as f:
            user = json.load(f)
        _merge(cfg, user)
    return cfg


def _merge(dst: dict, src: dict) -> None:
    for k, v in src.items():
        if k not in dst:
            raise ValueError(f"unknown config key {k!r}")
        if isinstance(dst[k], dict):
            if not isinstance(v, dict):
                raise ValueError(f"config key {k!r} must be an object")
            _merge(dst[k], v)
        else:
            dst[k] = v


def apply_override(cfg: dict, dotted: str, raw: str) -> None:
    """Set ``a.b.c`` to a JSON-parsed value (bare words stay strings)."""
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ValueError(f"unknown config path {dotted!r}")
        node = node[p]
    leaf = parts[-1]
    if leaf not in node:
        raise ValueError(f"unknown config path {dotted!r}")
    try:
        node[leaf] = json.loads(raw)
    except json.JSONDecodeError:
        node[leaf] = raw


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_config(cfg: dict, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
