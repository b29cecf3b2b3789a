"""Landmark-assisted CycleGAN on a small numpy autodiff engine."""
from .errors import CheckpointError, ConfigError, DataError, LMCGError, NumericError, ShapeError
from .losses import LossReport, LossWeights
from .nets import ModelBundle
from .tensor import Tensor, backward
from .training import TrainConfig, pretrain_regressor, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DataError", "LMCGError", "NumericError", "ShapeError",
    "LossReport", "LossWeights", "ModelBundle", "Tensor", "backward",
    "TrainConfig", "pretrain_regressor", "train_stage1", "train_stage2",
]
