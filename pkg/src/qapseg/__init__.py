"""Lung-lesion CT segmentation with an augmented-pyramid U-Net, written on numpy.

Modules:
    tensor: reverse-mode autodiff tensors, convolution and pooling primitives, ``.qat`` files.
    dilation: receptive-field and gridding arithmetic for stacked atrous convolutions.
    model: the encoder-decoder with optional atrous and pooling pyramids.
    training: focal loss, Adam, plateau schedule, early stopping, augmentation.
    metrics: confusion-matrix based segmentation scores.
    data: PGM/PPM I/O, normalisation, splits, synthetic phantoms, overlays.
    cli: the ``qapseg`` command.
"""

from .dilation import DilationSchedule, rank_schedules
from .errors import (ConfigurationError, DataError, DimensionError, FormatError, QapsegError, TrainingError,
                     UsageError)
from .metrics import ConfusionMatrix
from .model import Model, ModelConfig, build, parameter_count
from .tensor import Tensor, grad_check, no_grad
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "ConfusionMatrix", "DataError", "DilationSchedule", "DimensionError", "FormatError",
    "Model", "ModelConfig", "QapsegError", "Tensor", "TrainConfig", "TrainingError", "UsageError", "build",
    "grad_check", "no_grad", "parameter_count", "rank_schedules", "train",
]
