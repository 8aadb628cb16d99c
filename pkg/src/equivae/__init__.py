"""Invariant-equivariant VAE on a small numpy reverse-mode autodiff core."""

from .kernels import BACKEND as KERNEL_BACKEND
from .model import Architecture, EquiVAE
from .tensor import Tensor
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = ["Architecture", "EquiVAE", "KERNEL_BACKEND", "Tensor", "TrainConfig", "train", "__version__"]
