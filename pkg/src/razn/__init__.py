"""Segmentation over multi-resolution image pyramids with a learned zoom policy."""

from .core import (
    BaselineState,
    PolicyDecision,
    RewardRecord,
    TrainState,
    ZoomConfig,
    bounded_prob,
    infer_patch,
    reward,
    sample_action,
    train_step,
)
from .estimators import RAZNSegmenter, ScaleBaselineSegmenter
from .pyramid import PatchRef, PyramidDataset

__all__ = [
    "BaselineState",
    "PatchRef",
    "PolicyDecision",
    "PyramidDataset",
    "RAZNSegmenter",
    "RewardRecord",
    "ScaleBaselineSegmenter",
    "TrainState",
    "ZoomConfig",
    "bounded_prob",
    "infer_patch",
    "reward",
    "sample_action",
    "train_step",
]

__version__ = "0.1.0"
