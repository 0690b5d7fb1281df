"""Bootstrapped model-predictive control on toy continuous-control tasks.

A network policy guides a sampling-based planner, imitates the distributions
that planner produces, and a state-value function is trained with model-based
TD targets; a lazy reanalysis pass keeps the stored imitation targets fresh.
"""

from .envs import make_env, oracle_return
from .harness import RunConfig, evaluate, train
from .learner import KLScale, LearnerConfig
from .planner import Planner, PlannerConfig
from .replay import ReanalyzeConfig, ReplayBuffer
from .world_model import DiagGaussian, ModelConfig, WorldModel

__all__ = [
    "DiagGaussian", "KLScale", "LearnerConfig", "ModelConfig", "Planner",
    "PlannerConfig", "ReanalyzeConfig", "ReplayBuffer", "RunConfig",
    "WorldModel", "evaluate", "make_env", "oracle_return", "train",
]
__version__ = "0.1.0"
