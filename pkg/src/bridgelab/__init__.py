"""Prototypical networks with auxiliary-conditioned batch normalization, on a numpy autodiff core."""

from .autodiff import Tensor, grad_check, no_grad
from .data import MultimodalDataset, SyntheticGenConfig, generate_synthetic
from .simpaux import ModelConfig, SimpAuxModel
from .tensor import SeededRng

__all__ = [
    "ModelConfig",
    "MultimodalDataset",
    "SeededRng",
    "SimpAuxModel",
    "SyntheticGenConfig",
    "Tensor",
    "generate_synthetic",
    "grad_check",
    "no_grad",
]
__version__ = "0.1.0"
