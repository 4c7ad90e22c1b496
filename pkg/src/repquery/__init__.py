"""Query-based temporal repetition counting on synthetic feature sequences."""

from .geometry import Interval, giou_1d, iou_1d, position_loss
from .matcher import Assignment, build_cost_matrix, hungarian, match
from .model import ModelConfig, QueryModel, load_checkpoint, save_checkpoint
from .objective import LossWeights, total_loss
from .sets import PredictionSet, TargetSet
from .synth import GeneratorConfig, SequenceSample, generate_sample, generate_split

__all__ = [
    "Assignment",
    "GeneratorConfig",
    "Interval",
    "LossWeights",
    "ModelConfig",
    "PredictionSet",
    "QueryModel",
    "SequenceSample",
    "TargetSet",
    "build_cost_matrix",
    "generate_sample",
    "generate_split",
    "giou_1d",
    "hungarian",
    "iou_1d",
    "load_checkpoint",
    "match",
    "position_loss",
    "save_checkpoint",
    "total_loss",
]
