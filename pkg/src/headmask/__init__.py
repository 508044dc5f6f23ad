"""Trainable binary attention-head masks for a frozen decoder-only transformer."""

from .kernels import backend as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
