"""Semi-supervised sequence VAE for text classification on a small numpy autodiff core."""

from .harness import ExperimentConfig, load_config, run_matrix, run_speed_bench
from .model import Architecture, ModelParams, TokenBatch, classify, predict
from .objectives import VARIANTS, VariantConfig, variant
from .tensor import Tape, Tensor, precision
from .training import TrainConfig, Trainer, train, welch_t_test

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "ExperimentConfig",
    "ModelParams",
    "Tape",
    "Tensor",
    "TokenBatch",
    "TrainConfig",
    "Trainer",
    "VARIANTS",
    "VariantConfig",
    "classify",
    "load_config",
    "precision",
    "predict",
    "run_matrix",
    "run_speed_bench",
    "train",
    "variant",
    "welch_t_test",
]
