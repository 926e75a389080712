"""Hybrid convolution/transformer multi-image super-resolution at desk scale."""

from cotmisr.tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]
