"""Stacked joint-embedding pretraining on a small numpy autodiff core."""

__version__ = "0.1.0"

from .config import load_config, resolve_config
from .errors import (
    ConfigError,
    ContractViolation,
    CorruptionError,
    FormatError,
    NumericDomainError,
    SchemaError,
    SjeaError,
    TrainingDivergence,
)
from .losses import (
    covariance_loss,
    invariance_loss,
    sjea_total_loss,
    variance_loss,
    vicreg_loss,
)
from .model import build_sjea, train_step
from .tensor import Tape, Tensor, gradient_check, set_debug_checks
from .train import (
    collapse_metrics,
    knn_eval,
    linear_probe,
    load_dataset,
    pretrain,
)

__all__ = [
    "__version__",
    "Tape",
    "Tensor",
    "gradient_check",
    "set_debug_checks",
    "SjeaError",
    "ContractViolation",
    "NumericDomainError",
    "ConfigError",
    "FormatError",
    "CorruptionError",
    "SchemaError",
    "TrainingDivergence",
    "invariance_loss",
    "variance_loss",
    "covariance_loss",
    "vicreg_loss",
    "build_sjea",
    "sjea_total_loss",
    "train_step",
    "load_config",
    "resolve_config",
    "load_dataset",
    "pretrain",
    "linear_probe",
    "knn_eval",
    "collapse_metrics",
]
