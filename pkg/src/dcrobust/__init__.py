"""Data-centric robustness toolkit.

Enhances an image-classification training set by replacing a random share
of it with transferable adversarial examples and a share with common
corruptions, then trains and scores models on clean, adversarial and
corrupted test subsets.
"""

from .attack import (
    AttackConfig,
    PerturbationBudget,
    combine_dual_norm,
    run_attack,
)
from .corruptions import CorruptionSpec, apply_corruption, corruption_registry
from .data import (
    EnhancementConfig,
    LabeledDataset,
    SplitRatio,
    enhance,
    load_cifar10_binary,
    load_dataset,
    save_dataset,
)
from .models import (
    EnsembleClassifier,
    GradientClassifier,
    ImageBatch,
    ReferenceCNN,
    input_gradient,
    load_model,
    save_model,
)
from .train_eval import (
    EvaluationSuite,
    TrainConfig,
    accuracy,
    build_evaluation_suite,
    erm_train,
    render_report,
    robustness_score,
)

__all__ = [
    "CorruptionSpec",
    "apply_corruption",
    "corruption_registry",
    "AttackConfig",
    "PerturbationBudget",
    "combine_dual_norm",
    "run_attack",
    "EnhancementConfig",
    "LabeledDataset",
    "SplitRatio",
    "enhance",
    "load_cifar10_binary",
    "load_dataset",
    "save_dataset",
    "EnsembleClassifier",
    "GradientClassifier",
    "ImageBatch",
    "ReferenceCNN",
    "input_gradient",
    "load_model",
    "save_model",
    "EvaluationSuite",
    "TrainConfig",
    "accuracy",
    "build_evaluation_suite",
    "erm_train",
    "render_report",
    "robustness_score",
]

__version__ = "0.1.0"
