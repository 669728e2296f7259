"""Sign-language gloss recognition from skeletal keypoints.

A numpy transformer with feature-isolated part encoders, ProbSparse
attention, kinematic hand rectification and patience-based early exit.
"""
from .attention import AttentionConfig, full_attention, probsparse_attention, sparsity_scores
from .infer import EarlyExitConfig, ExitTrace, evaluate, infer_adaptive, patience_update, robustness_sweep
from .model import (
    ForwardTrace,
    SiformerConfig,
    SiformerParams,
    count_flops,
    forward,
    init_params,
    load_params,
    save_params,
)
from .rectify import ConstraintTable, RectifyConfig, rectify_sequence
from .sampling import AugmentConfig, SmoteConfig, augment, normalize_parts, smote_balance
from .skeleton import LabeledDataset, SkeletalSequence, load_dataset, save_dataset
from .synthetic import SyntheticSpec, generate_synthetic_dataset, split_synthetic
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "AugmentConfig", "ConstraintTable", "EarlyExitConfig", "ExitTrace",
    "ForwardTrace", "LabeledDataset", "RectifyConfig", "SiformerConfig", "SiformerParams",
    "SkeletalSequence", "SmoteConfig", "SyntheticSpec", "TrainConfig", "augment",
    "count_flops", "evaluate", "forward", "full_attention", "generate_synthetic_dataset",
    "infer_adaptive", "init_params", "load_dataset", "load_params", "normalize_parts",
    "patience_update", "probsparse_attention", "rectify_sequence", "robustness_sweep",
    "save_dataset", "save_params", "smote_balance", "sparsity_scores", "split_synthetic", "train",
]
