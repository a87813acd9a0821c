"""Multimodal transfer-learned regression (DMTL-R) on synthetic phase-field data.

Subpackages are imported lazily by users; the common entry points are
re-exported here for convenience.
"""

from .datagen import generate_dataset, run_simulation
from .featurizer import Backbone, build_backbone, freeze, pretrain_backbone
from .harness import ExperimentConfig, run_experiment
from .metrics import confidence_interval, r_squared
from .model import TrainConfig, build_dmtlr, build_image_only, build_stats_only, train

__version__ = "0.1.0"

__all__ = [
    "Backbone", "ExperimentConfig", "TrainConfig", "build_backbone", "build_dmtlr", "build_image_only",
    "build_stats_only", "confidence_interval", "freeze", "generate_dataset", "pretrain_backbone",
    "r_squared", "run_experiment", "run_simulation", "train",
]
