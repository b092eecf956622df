"""Learned surrogate losses for non-decomposable binary classification metrics.

The package trains a set-invariant loss network to mimic a target metric
(misclassification rate, AUC, F-score, ...) and alternates its updates with
prediction-network updates, so models can be trained by gradient descent
against metrics that are neither differentiable nor decomposable.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Value
from .metrics import MetricId, calibrate_threshold, confusion, true_loss
from .nets import (
    PredictionNet,
    SurrogateNet,
    ToyAffineModel,
    adam_step,
    clip_gradients,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
    surrogate_loss,
)
from .training import (
    TrainConfig,
    evaluate,
    meta_loss,
    pretrain_universal,
    train_baseline,
    train_bilevel,
)

__all__ = [
    "Tape",
    "Value",
    "MetricId",
    "confusion",
    "true_loss",
    "calibrate_threshold",
    "PredictionNet",
    "SurrogateNet",
    "ToyAffineModel",
    "init_params",
    "predict",
    "surrogate_loss",
    "adam_step",
    "clip_gradients",
    "save_checkpoint",
    "load_checkpoint",
    "TrainConfig",
    "train_bilevel",
    "pretrain_universal",
    "train_baseline",
    "evaluate",
    "meta_loss",
    "__version__",
]
