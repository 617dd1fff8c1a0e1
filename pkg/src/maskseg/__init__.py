"""Prompt-free mask-classification segmentation for 3D volumes."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, backward, grad_check, no_grad

__all__ = ["Tensor", "Tape", "backward", "grad_check", "no_grad", "__version__"]
