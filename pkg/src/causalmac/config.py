"""Experiment configuration: dataclasses plus the INI-style config file.

The file has two sections, ``[env]`` and ``[train]``; every key is
optional and defaults to the paper's value. Grammar::

    [env]
    num_nodes = 1              ; U
    buffer_capacity = 2        ; P packets per node
    max_steps = 16             ; T_max slots per episode
    bler = 0.5                 ; erasure probability rho
    history_window = 1         ; N; defaults to 3 when num_nodes >= 2 else 1
    erased_looks_idle = true
    arrival_rate = 0.0

    [train]
    method = causal-mbrl       ; causal-mbrl | tabular-q | predefined
    episodes = 1024            ; total real-episode budget
    seeds = 0,1,2,3
    lr = 1e-4
    gamma = 0.99
    gae_lambda = 0.95
    k_rollout = 6
    n_rollout = 50
    n_model = 100
    n_ppo = 5
    batch_size = 64
    episodes_per_epoch = 20
    n_graph = 1
    n_round = 4
    eval_episodes = 128
    clip_eps = 0.2
    entropy_coef = 0.0
    l2 = 1e-4
    q_alpha = 0.1
    replay_capacity =          ; empty = unbounded
    share_policy_weights = false

Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace

from .env import EnvConfig
from .errors import ConfigError

METHODS = ("causal-mbrl", "tabular-q", "predefined")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "causal-mbrl"
    episodes: int = 1024
    seeds: tuple = (0, 1, 2, 3)
    lr: float = 1e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    k_rollout: int = 6
    n_rollout: int = 50
    n_model: int = 100
    n_ppo: int = 5
    batch_size: int = 64
    episodes_per_epoch: int = 20
    n_graph: int = 1
    n_round: int = 4
    eval_episodes: int = 128
    clip_eps: float = 0.2
    entropy_coef: float = 0.0
    l2: float = 1e-4
    q_alpha: float = 0.1
    replay_capacity: int | None = None
    share_policy_weights: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        positives = ("episodes", "lr", "k_rollout", "n_ppo", "batch_size",
                     "episodes_per_epoch", "n_graph", "n_round", "eval_episodes")
        for name in positives:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("n_rollout", "n_model", "entropy_coef", "l2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("gamma and gae_lambda must be in [0,1]")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError(f"clip_eps must be in (0,1), got {self.clip_eps}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.replay_capacity is not None and self.replay_capacity < 1:
            raise ConfigError("replay_capacity must be positive or unset")

    @property
    def n_epoch(self) -> int:
        return max(1, self.episodes // self.episodes_per_epoch)


def default_history_window(num_nodes: int) -> int:
    return 3 if num_nodes >= 2 else 1


_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False}


def _parse_value(raw: str, kind: type, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            return _BOOL[raw.lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


_ENV_KEYS = {
    "num_nodes": int, "buffer_capacity": int, "max_steps": int, "bler": float,
    "history_window": int, "erased_looks_idle": bool, "arrival_rate": float,
}

_TRAIN_KEYS = {
    "method": str, "episodes": int, "seeds": str, "lr": float, "gamma": float,
    "gae_lambda": float, "k_rollout": int, "n_rollout": int, "n_model": int,
    "n_ppo": int, "batch_size": int, "episodes_per_epoch": int, "n_graph": int,
    "n_round": int, "eval_episodes": int, "clip_eps": float,
    "entropy_coef": float, "l2": float, "q_alpha": float,
    "replay_capacity": str, "share_policy_weights": bool,
}


def load_config(path) -> tuple[EnvConfig, TrainConfig]:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    for section in parser.sections():
        if section not in ("env", "train"):
            raise ConfigError(f"unknown config section [{section}]")

    env_kwargs = {}
    if parser.has_section("env"):
        for key, raw in parser.items("env"):
            if key not in _ENV_KEYS:
                raise ConfigError(f"unknown key {key!r} in [env]")
            env_kwargs[key] = _parse_value(raw, _ENV_KEYS[key], key)
    if "history_window" not in env_kwargs:
        env_kwargs["history_window"] = default_history_window(
            env_kwargs.get("num_nodes", 1))
    env_cfg = EnvConfig(**env_kwargs)

    train_kwargs = {}
    if parser.has_section("train"):
        for key, raw in parser.items("train"):
            if key not in _TRAIN_KEYS:
                raise ConfigError(f"unknown key {key!r} in [train]")
            if key == "seeds":
                try:
                    train_kwargs["seeds"] = tuple(
                        int(s) for s in raw.replace(",", " ").split())
                except ValueError as exc:
                    raise ConfigError(f"bad seeds list: {raw!r}") from exc
            elif key == "replay_capacity":
                raw = raw.strip()
                train_kwargs["replay_capacity"] = int(raw) if raw else None
            else:
                train_kwargs[key] = _parse_value(raw, _TRAIN_KEYS[key], key)
    train_cfg = TrainConfig(**train_kwargs)
    return env_cfg, train_cfg


def with_overrides(cfg: TrainConfig, **kwargs) -> TrainConfig:
    return replace(cfg, **kwargs)
