"""Adversarial (WGAN-GP) and MSE super-resolution of gridded precipitation."""

from ._accel import backend
from .autodiff import Tensor, backward, grad, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "grad", "no_grad", "backend", "__version__"]
