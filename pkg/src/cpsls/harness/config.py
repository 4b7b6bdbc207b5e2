"""YAML experiment configuration.

Schema (every key optional)::

    scenario: car-id              # car-id | car-ood-attract | car-active-region | car-friction | quad-fall
    modes: [cp-ellipsoid, vmpc]   # cp-ellipsoid | cp-ball | vmpc
    trials: 10
    seed: 0
    out_dir: runs/car-id
    data_dir: null                # gen-data output / train input
    model_dir: null               # trained models; trained on the fly when null
    calib_path: null              # calibration file; built from fresh data when null
    hidden: null                  # hidden width; 64 car / 128 quad when null
    counts: {n_train: 10000, n_uncert: 10000, n_calib: 2000}
    variant: {dt: 0.1, k_attr: -0.5}      # dynamics constants
    mpc: {rho: 0.97, alpha_k: 0.00667, T: 15, max_steps: 100,
          active: {enabled: true, n_reps: 800}}

``mpc`` keys are the fields of :class:`cpsls.mpc.MpcConfig`; ``active`` maps
to :class:`cpsls.mpc.ActiveConfig`.
"""

import dataclasses

import yaml

from cpsls import mpc
from cpsls.dynamics import ALL_TAGS, ScenarioVariant
from cpsls.harness.experiment import ExperimentConfig
from cpsls.harness.scenarios import default_mpc_config

TOP_KEYS = {"scenario", "modes", "trials", "seed", "out_dir", "data_dir", "model_dir", "calib_path",
            "hidden", "counts", "variant", "mpc"}
COUNT_KEYS = {"n_train", "n_uncert", "n_calib"}


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


def _fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def load_config(path):
    """Parse and validate a YAML file; returns a plain dict."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return validate(raw or {})


def validate(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    extra = set(raw) - TOP_KEYS
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    d = dict(raw)
    if "scenario" in d and d["scenario"] not in ALL_TAGS:
        raise ConfigError(f"unknown scenario {d['scenario']!r}")
    if "modes" in d:
        if isinstance(d["modes"], str):
            d["modes"] = [d["modes"]]
        bad = [m for m in d["modes"] if m not in mpc.MODES]
        if bad:
            raise ConfigError(f"unknown modes {bad}")
    for key in ("trials", "seed", "hidden"):
        if d.get(key) is not None and (not isinstance(d[key], int) or d[key] < 0):
            raise ConfigError(f"{key} must be a nonnegative integer")
    variant_keys = (_fields(ScenarioVariant) - {"tag"}) | {"dt"}
    mpc_keys = _fields(mpc.MpcConfig) - {"n_x", "n_u", "goal", "mode"}
    for key, allowed in (("counts", COUNT_KEYS), ("variant", variant_keys), ("mpc", mpc_keys)):
        sub = d.get(key) or {}
        if not isinstance(sub, dict):
            raise ConfigError(f"{key} must be a mapping")
        extra = set(sub) - allowed
        if extra:
            raise ConfigError(f"unknown {key} keys: {sorted(extra)}")
        d[key] = sub
    if any(not isinstance(v, int) or v <= 0 for v in d["counts"].values()):
        raise ConfigError("counts must be positive integers")
    active = d["mpc"].get("active")
    if active is not None and not isinstance(active, dict):
        raise ConfigError("mpc.active must be a mapping")
    if active is not None and set(active) - _fields(mpc.ActiveConfig):
        raise ConfigError(f"unknown mpc.active keys: {sorted(set(active) - _fields(mpc.ActiveConfig))}")
    return d


def mpc_overrides(d):
    over = dict(d.get("mpc") or {})
    if isinstance(over.get("active"), dict):
        over["active"] = mpc.ActiveConfig(**over["active"])
    return over


def experiment_config(d, **overrides):
    """Build an :class:`ExperimentConfig` from a validated dict plus CLI overrides."""
    d = dict(d)
    d.update({k: v for k, v in overrides.items() if v is not None})
    kw = {k: d[k] for k in _fields(ExperimentConfig) if k in d and d[k] is not None}
    if "modes" in kw:
        kw["modes"] = tuple(kw["modes"])
    kw["mpc"] = mpc_overrides(d)
    try:
        cfg = ExperimentConfig(**kw)
        if kw["mpc"]:
            default_mpc_config(cfg.scenario, **kw["mpc"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg
