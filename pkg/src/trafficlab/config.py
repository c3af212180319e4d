"""Experiment configuration: defaults, file loading, overrides and validation."""

from __future__ import annotations

import copy
import json
import zlib
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from .agents import DDPGConfig, DQNConfig
from .env import ArrivalModel, PassingRates, parse_scenario


class ConfigInvalid(ValueError):
    pass


DEFAULTS: dict = {
    "scenario": "single",
    "seed": None,
    "arrivals": {"kind": "bernoulli", "avenue": 0.25, "cross": 0.25, "mode": "chained"},
    "rates": {"avenue": 1, "cross": 1},
    "policy": {"name": "fixed-cycle", "params": {}},
    "horizon": 150,
    "episodes": 10,
    "gamma": 0.99,
    "checkpoint": None,
    "mdp": {"x_max": 30, "method": "policy", "tol": 1e-10, "max_iter": 1000},
    "dqn": {"total_steps": 100_000, "episode_len": 150, "hidden": [400, 400]},
    "ddpg": {"total_steps": 50_000, "episode_len": 150},
    "fluid": {"lam0": 0.25, "lam": [0.25, 0.25, 0.25], "Y": 1.0, "O": 1.0,
              "deltas": [0.0, 0.1, 0.5, 1.0], "horizon_cycles": 60},
    "greenwave": {"window": 20, "threshold": 0.9, "max_lag": 10},
    "compare": {"policies": []},
    "trajectory": None,
}

POLICY_NAMES = ("fixed-cycle", "threshold", "greenwave", "random", "mdp", "dqn", "ddpg")


def deep_merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_file(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigInvalid(f"cannot read config {path}: {e}") from e
    try:
        data = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigInvalid(f"cannot parse config {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigInvalid(f"config {path} must be a mapping")
    return data


def apply_override(cfg: dict, item: str) -> None:
    """Apply ``dotted.key=value``; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigInvalid(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = [k for k in key.strip().split(".") if k]
    if not parts:
        raise ConfigInvalid(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigInvalid(f"cannot parse override value {raw!r}") from e
    node = cfg
    for k in parts[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[parts[-1]] = value


def build_config(path=None, overrides=(), seed=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = deep_merge(cfg, load_file(path))
    for item in overrides:
        apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = seed
    validate(cfg)
    return cfg


def _require(cond, msg):
    if not cond:
        raise ConfigInvalid(msg)


def _dataclass_kwargs(cls, section: dict, extra: tuple, name: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known - set(extra)
    _require(not unknown, f"unknown {name} keys: {sorted(unknown)}")
    out = {k: v for k, v in section.items() if k in known}
    for k in ("hidden", "actor_hidden", "critic_hidden"):
        if k in out:
            out[k] = tuple(int(v) for v in out[k])
    return out


def validate(cfg: dict) -> None:
    unknown = set(cfg) - set(DEFAULTS)
    _require(not unknown, f"unknown config keys: {sorted(unknown)}")
    seed = cfg.get("seed")
    _require(isinstance(seed, int) and not isinstance(seed, bool) and seed >= 0,
             "seed is mandatory and must be a non-negative integer")
    try:
        parse_scenario(str(cfg["scenario"]))
        arrivals(cfg)
        rates(cfg)
    except (ValueError, TypeError) as e:
        raise ConfigInvalid(str(e)) from e
    for k in ("horizon", "episodes"):
        _require(isinstance(cfg[k], int) and cfg[k] >= 1, f"{k} must be a positive integer")
    _require(0.0 < float(cfg["gamma"]) <= 1.0, "gamma must lie in (0, 1]")
    pol = cfg["policy"]
    _require(isinstance(pol, dict) and pol.get("name") in POLICY_NAMES,
             f"policy.name must be one of {POLICY_NAMES}")
    _require(isinstance(pol.get("params", {}), dict), "policy.params must be a mapping")
    for entry in cfg["compare"].get("policies", []):
        _require(isinstance(entry, dict) and entry.get("name") in POLICY_NAMES,
                 f"compare.policies entries need a name from {POLICY_NAMES}")
    mdp = cfg["mdp"]
    _require(isinstance(mdp.get("x_max"), int) and mdp["x_max"] >= 1, "mdp.x_max must be >= 1")
    _require(mdp.get("method") in ("policy", "value"), "mdp.method must be 'policy' or 'value'")
    _require(float(mdp.get("tol", 0)) > 0, "mdp.tol must be positive")
    try:
        dqn_config(cfg)
        ddpg_config(cfg)
    except TypeError as e:
        raise ConfigInvalid(str(e)) from e
    for sect in ("dqn", "ddpg"):
        for k in ("total_steps", "episode_len"):
            v = cfg[sect].get(k)
            _require(isinstance(v, int) and v >= 1, f"{sect}.{k} must be a positive integer")
    gw = cfg["greenwave"]
    _require(isinstance(gw.get("window"), int) and gw["window"] >= 1, "greenwave.window must be >= 1")
    _require(0.0 <= float(gw.get("threshold", -1)) <= 1.0, "greenwave.threshold must lie in [0, 1]")
    fl = cfg["fluid"]
    _require(all(k in fl for k in ("lam0", "lam", "Y", "O")), "fluid needs lam0, lam, Y and O")


def arrivals(cfg: dict) -> ArrivalModel:
    a = cfg["arrivals"]
    return ArrivalModel(kind=a.get("kind", "bernoulli"), avenue=a["avenue"], cross=a["cross"],
                        mode=a.get("mode", "chained"))


def rates(cfg: dict) -> PassingRates:
    return PassingRates(int(cfg["rates"]["avenue"]), int(cfg["rates"]["cross"]))


def dqn_config(cfg: dict) -> DQNConfig:
    kw = _dataclass_kwargs(DQNConfig, cfg["dqn"], ("total_steps", "episode_len"), "dqn")
    kw.setdefault("gamma", float(cfg["gamma"]))
    return DQNConfig(**kw)


def ddpg_config(cfg: dict) -> DDPGConfig:
    kw = _dataclass_kwargs(DDPGConfig, cfg["ddpg"], ("total_steps", "episode_len"), "ddpg")
    kw.setdefault("gamma", float(cfg["gamma"]))
    return DDPGConfig(**kw)


# -------------------------------------------------------------------- RNG


def stream(seed: int, name: str, *index: int) -> np.random.SeedSequence:
    """Named, independent child of the master seed.

    Streams for arrivals, network initialisation and exploration are kept
    apart so that changing one consumer never shifts another's draws.
    """
    key = zlib.crc32(name.encode())
    return np.random.SeedSequence(entropy=seed, spawn_key=(key, *index))


def stream_int(seed: int, name: str, *index: int) -> int:
    return int(stream(seed, name, *index).generate_state(1, np.uint64)[0])
