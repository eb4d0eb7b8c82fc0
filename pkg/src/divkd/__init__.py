"""Two-level online knowledge distillation with multi-branch diversity enhancement."""

from ._kernels import BACKEND
from .tensor import Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["BACKEND", "Tensor", "grad_check", "no_grad", "__version__"]
