"""Spiking-network training with shortcut branch heads and an evolutionary balance schedule."""

from .tensor import Tensor, backward, no_grad

__all__ = ["Tensor", "backward", "no_grad"]
__version__ = "0.1.0"
