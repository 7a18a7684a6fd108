"""Desk-scale multi-branch high-resolution segmentation stack.

Everything runs on a small reverse-mode autodiff core (`hiresnet.tensor`);
numpy supplies the array storage and BLAS kernels, nothing else is borrowed.
"""

from .losses import LossConfig
from .network import NetworkConfig, SegOutput
from .params import ParamStore
from .tensor import ConvSpec, Tape, Tensor, backward, tensor_from

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "ConvSpec", "backward", "tensor_from",
           "NetworkConfig", "SegOutput", "LossConfig", "ParamStore",
           "__version__"]
