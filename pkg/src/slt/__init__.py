"""Sequence-level training (self-critical REINFORCE over tracking episodes)
for a small Siamese tracker, with frame-level baselines, enumerable oracle
environments and a one-pass evaluation harness."""

from .boxgeom import Box, CropSpec, PerturbConfig, center_distance, clip_box, giou, iou, perturb, search_region
from .config import EvalProtocol, TrainConfig
from .metrics import EvalReport, average_overlap, episode_reward, success_auc, success_rate

__version__ = "0.1.0"

__all__ = [
    "Box", "CropSpec", "PerturbConfig", "center_distance", "clip_box", "giou", "iou", "perturb", "search_region",
    "EvalProtocol", "TrainConfig",
    "EvalReport", "average_overlap", "episode_reward", "success_auc", "success_rate",
]
