"""Differentiable channel-width search with Gumbel or Gaussian channel masks."""

from .masking import ChannelOptions, GaussianSelector, GumbelSelector, MaskBank, make_mask, masked_forward
from .supernet import ArchitectureSpec, ConcreteNet, NetConfig, StageSpec, Supernet, build_supernet, finalize
from .tensor import Tensor

__all__ = ["ArchitectureSpec", "ChannelOptions", "ConcreteNet", "GaussianSelector", "GumbelSelector", "MaskBank",
           "NetConfig", "StageSpec", "Supernet", "Tensor", "build_supernet", "finalize", "make_mask",
           "masked_forward"]
__version__ = "0.1.0"
