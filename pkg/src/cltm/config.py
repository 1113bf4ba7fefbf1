"""Run configuration: one JSON document holding every hyperparameter plus a master seed.

Unknown keys are rejected. The resolved configuration (defaults filled in) is
echoed into each output so an artifact records how it was made. Stage seeds
come from ``sha256("<seed>:<stage>")`` so each stage gets an independent
stream that does not depend on which other stages ran.
"""

from __future__ import annotations

import copy
import hashlib
import json

from .kernel_distance import CLAMP_CEILING, DEFAULT_LAMBDA, DEFAULT_QUERY_SUBSAMPLE, DET_FLOOR
from .potentials import TrainConfig
from .structure import DEFAULT_EPSILON

DEFAULTS = {
    "seed": 0,
    "kernel": {
        "gamma": None,  # None: median heuristic
        "lambda": DEFAULT_LAMBDA,
        "scale_by_n": True,
        "query_subsample": DEFAULT_QUERY_SUBSAMPLE,  # None: every sample
        "landmarks": None,  # None: exact solve; an int switches to Nystrom
        "det_floor": DET_FLOOR,
        "clamp_ceiling": CLAMP_CEILING,
    },
    "structure": {
        "epsilon": DEFAULT_EPSILON,
        "scale_epsilon": True,
    },
    "train": {
        "batch_size": 250,
        "learning_rate": 0.05,
        "lr_decay": 0.01,
        "epochs": 30,
        "dropout_rate": 0.5,
        "edge_l2": 1e-4,
        "depth": 3,
        "hidden_widths": None,
        "standardize": True,
        "init": "glorot",
    },
    "eval": {
        "threshold": 0.5,
        "grid_points": 101,
        "k": None,  # None: number of distinct scenes
        "restarts": 20,
        "scene_source": "hidden",
    },
    "synth": {
        "n": 2000,
        "n_observed": 8,
        "n_latent": 2,
        "n_clusters": 3,
        "dim": 3,
        "edge_range": [1.5, 3.0],
        "bias_scale": 1.0,
        "bias_mean": 0.0,
        "repulsive_fraction": 0.0,
        "scene_on_latent": False,
        "separation": 10.0,
        "noise_scale": 1.0,
        "validation_fraction": 0.2,
        "binary_features": False,
    },
}


class ConfigError(ValueError):
    pass


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key '{where}{key}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}{key}' must be an object")
            out[key] = _merge(defaults[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def resolve(given: dict | None = None, seed: int | None = None) -> dict:
    """Defaults overlaid with ``given``; a non-None ``seed`` overrides the file's seed."""
    config = _merge(DEFAULTS, given or {}, "")
    if seed is not None:
        config["seed"] = seed
    if not isinstance(config["seed"], int) or config["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    # fail early on bad training options rather than at the train stage
    try:
        train_config(config, "train")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return config


def load(path=None, seed: int | None = None) -> dict:
    given = {}
    if path is not None:
        with open(path) as fh:
            try:
                given = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(given, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return resolve(given, seed)


def stage_seed(master: int, stage: str) -> int:
    digest = hashlib.sha256(f"{master}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def train_config(config: dict, stage: str) -> TrainConfig:
    options = dict(config["train"])
    options["seed"] = stage_seed(config["seed"], stage)
    return TrainConfig.from_dict(options)
