"""Desk-scale geometry-enhanced vision-and-language navigation agent."""

from .evaluation import EvalResult, evaluate_split, navigation_error, spl, success, trajectory_length
from .learning import TrainConfig, train, train_step
from .model import GeoVLNAgent, ModelConfig
from .slot_fusion import LsaConfig, TwoStageModule
from .world import Episode, WorldGraph, generate_world, make_episode, observe

__version__ = "0.1.0"

__all__ = [
    "EvalResult",
    "evaluate_split",
    "navigation_error",
    "spl",
    "success",
    "trajectory_length",
    "TrainConfig",
    "train",
    "train_step",
    "GeoVLNAgent",
    "ModelConfig",
    "LsaConfig",
    "TwoStageModule",
    "Episode",
    "WorldGraph",
    "generate_world",
    "make_episode",
    "observe",
]
