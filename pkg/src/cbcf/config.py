"""Declarative experiment configuration (YAML) with dotted-key overrides."""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from cbcf.errors import ConfigError

DEFAULTS: dict = {
    "dataset": "data/ml-100k/u.data",
    "seed": 0,
    "out": "out",
    "cache": ".cbcf-cache",
    "jobs": 1,
    "delta_pref": 4.0,
    "split": {
        "mode": "random_holdout",
        "test_fraction": 0.2,
        "test_user_rating_range": [20, 30],
        "retained_ratings_range": [3, 20],
    },
    "predictor": {"method": "item_based", "k": 50},
    "clustering": {
        "method": "spectral",          # spectral | fcm | none
        "c": 10,
        "sigma": None,
        "kmeans_restarts": 10,
        "m": 2.0,
        "epsilon": 1e-4,
        "max_iters": 300,
        "pca_components": None,
    },
    # fixed-threshold evaluation; either or both may be set
    "thresholds": None,               # {alpha, beta, gamma}
    "baseline_threshold": None,
    "grid": None,                     # {alpha_range, beta_range, gamma_range, objective, ...}
    "baseline_grid": [0.0, 5.0, 0.1],
    "protocol": "same_split",         # same_split | validation
    "validation_fraction": 0.2,
    "precision_levels": None,
    "frontier_thresholds": [4.0, 3.8, 3.6, 3.4, 3.2],
    "figures": True,
}


def _merge(base: dict, extra: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the YAML file, then dotted ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        cfg = _merge(cfg, data)
        base = p.parent
        ds = Path(cfg["dataset"])
        if not ds.is_absolute() and not ds.exists() and (base / ds).exists():
            cfg["dataset"] = str(base / ds)
    for key, value in (overrides or {}).items():
        set_dotted(cfg, key, value)
    validate(cfg)
    return cfg


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if node.get(p) is None and p in ("thresholds", "grid"):
            node[p] = {}
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    node[parts[-1]] = value


_OPTIONAL_KEYS = ("thresholds.alpha", "thresholds.beta", "thresholds.gamma",
                  "grid.alpha_range", "grid.beta_range", "grid.gamma_range",
                  "grid.objective", "grid.precision_floor", "grid.recall_floor")


def flat_keys() -> list[str]:
    """Every leaf key in dotted form, for generating CLI flags."""
    def walk(d, prefix):
        for k, v in d.items():
            if isinstance(v, dict):
                yield from walk(v, prefix + k + ".")
            elif prefix or k not in ("thresholds", "grid"):
                yield prefix + k
    return sorted(set(walk(DEFAULTS, "")) | set(_OPTIONAL_KEYS))


def validate(cfg: dict) -> None:
    if cfg["split"]["mode"] not in ("random_holdout", "cold_start_mask"):
        raise ConfigError(f"unknown split mode {cfg['split']['mode']!r}")
    if cfg["predictor"]["method"] not in ("item_based", "user_based"):
        raise ConfigError(f"unknown predictor {cfg['predictor']['method']!r}")
    if cfg["clustering"]["method"] not in ("spectral", "fcm", "none"):
        raise ConfigError(f"unknown clustering {cfg['clustering']['method']!r}")
    if cfg["protocol"] not in ("same_split", "validation"):
        raise ConfigError(f"unknown protocol {cfg['protocol']!r}")
    t = cfg.get("thresholds")
    if t is not None and not {"alpha", "beta", "gamma"} <= set(t):
        raise ConfigError("thresholds needs alpha, beta and gamma")
    try:
        int(cfg["seed"])
    except (TypeError, ValueError):
        raise ConfigError("seed must be an integer") from None
