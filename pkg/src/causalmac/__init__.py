"""Causal model-based multi-agent RL for IoT uplink channel access."""

__version__ = "0.1.0"

from .config import TrainConfig, load_config
from .env import Decision, EnvConfig, MacEnv
from .errors import ConfigError, ContractError, UsageError
from .experiment import evaluate, theorem1_ratio, train
from .graph import default_graph
from .inference import CausalWorldModel

__all__ = [
    "CausalWorldModel",
    "ConfigError",
    "ContractError",
    "Decision",
    "EnvConfig",
    "MacEnv",
    "TrainConfig",
    "UsageError",
    "default_graph",
    "evaluate",
    "load_config",
    "theorem1_ratio",
    "train",
    "__version__",
]
