"""Dual-branch sound event detection on a small numpy autodiff."""
from .autodiff import ContractError, DimensionError, Tensor, backward, grad_check, no_grad
from .model import DualBranchModel, ModelConfig, model_forward
from .nn import ConfigError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DualBranchModel",
    "ModelConfig",
    "Tensor",
    "backward",
    "grad_check",
    "model_forward",
    "no_grad",
]
