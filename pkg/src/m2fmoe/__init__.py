"""Dual-view (Fourier and wavelet) frequency mixture-of-experts forecaster
for time series with extreme events, built on a small numpy autodiff engine.
"""

from .errors import (ConfigError, DataError, M2FMoEError, NumericError)
from .model import VARIANTS, AblationFlags, M2FMoE, ModelConfig, count_parameters, tiny_config
from .tensor import Tape, Tensor, backward, grad_check
from .training import TrainConfig, evaluate, load_model, save_model, train

__all__ = [
    "AblationFlags", "ConfigError", "DataError", "M2FMoE", "M2FMoEError", "ModelConfig",
    "NumericError", "Tape", "Tensor", "TrainConfig", "VARIANTS", "backward", "count_parameters",
    "evaluate", "grad_check", "load_model", "save_model", "tiny_config", "train",
]
__version__ = "0.1.0"
