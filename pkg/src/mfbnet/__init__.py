"""Multi-modal factorized bilinear fusion and a co-attention network in numpy."""

from .attention import CoAttModel, ModelConfig, coatt_forward, baseline_forward
from .errors import (ConfigurationError, ContractError, DimensionError, InputError, MfbError, NumericError,
                     TrainingError)
from .fusion import FusionSpec, McbParams, MfbParams, mcb, mfb, mfb_module, mlb
from .tensor_core import Tape, Tensor, backward, grad_check

__all__ = [
    "CoAttModel", "ModelConfig", "coatt_forward", "baseline_forward",
    "ConfigurationError", "ContractError", "DimensionError", "InputError", "MfbError", "NumericError", "TrainingError",
    "FusionSpec", "McbParams", "MfbParams", "mcb", "mfb", "mfb_module", "mlb",
    "Tape", "Tensor", "backward", "grad_check",
]
