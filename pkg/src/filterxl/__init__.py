"""FILTER cross-lingual fusion encoders with self-teaching, at desk scale."""

from .encoder import EncoderConfig
from .model import FilterConfig, FilterModel, TaskKind, validate_config
from .tensor import Tape, Tensor, backward, finite_diff_check, no_grad
from .trainer import TrainConfig, generate_soft_labels, train_student, train_teacher

__all__ = [
    "EncoderConfig",
    "FilterConfig",
    "FilterModel",
    "TaskKind",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "finite_diff_check",
    "generate_soft_labels",
    "no_grad",
    "train_student",
    "train_teacher",
    "validate_config",
]

__version__ = "0.1.0"
