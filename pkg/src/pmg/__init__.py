"""Progressive multi-granularity training with jigsaw patches."""

from .config import RunConfig, load_config
from .data import LabeledDataset, SyntheticSpec, TransformConfig, load_image_folder, make_synthetic
from .inference import EvalReport, Prediction, evaluate, predict
from .jigsaw import (
    PatchPermutation,
    apply_jigsaw,
    granularity_for_stage,
    granularity_schedule,
    invert_permutation,
    sample_permutation,
)
from .model import ArchConfig, PMGNet, build_model, forward_concat, forward_to_stage
from .trainer import OptimizerState, StepRecord, TrainingConfig, cosine_lr, cross_entropy, fit, sgd_update, train_iteration

__version__ = "0.1.0"

__all__ = [
    "PatchPermutation",
    "apply_jigsaw",
    "granularity_for_stage",
    "granularity_schedule",
    "invert_permutation",
    "sample_permutation",
    "RunConfig",
    "load_config",
    "LabeledDataset",
    "SyntheticSpec",
    "TransformConfig",
    "load_image_folder",
    "make_synthetic",
    "EvalReport",
    "Prediction",
    "evaluate",
    "predict",
    "ArchConfig",
    "PMGNet",
    "build_model",
    "forward_concat",
    "forward_to_stage",
    "OptimizerState",
    "StepRecord",
    "TrainingConfig",
    "cosine_lr",
    "cross_entropy",
    "fit",
    "sgd_update",
    "train_iteration",
]
