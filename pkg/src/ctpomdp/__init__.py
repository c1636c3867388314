"""Continuous-time POMDPs: exact continuous-discrete filtering, thinning simulation,
belief-space HJB collocation and advantage updating."""

__version__ = "0.1.0"

from .envs import build_env, build_gridworld, build_slotted_aloha, build_tiger
from .filtering import IntegratorConfig, bayes_reset, propagate
from .model import PomdpModel, validate

__all__ = [
    "IntegratorConfig",
    "PomdpModel",
    "__version__",
    "bayes_reset",
    "build_env",
    "build_gridworld",
    "build_slotted_aloha",
    "build_tiger",
    "propagate",
    "validate",
]
