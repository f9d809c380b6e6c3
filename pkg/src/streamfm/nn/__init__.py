"""Minimal reverse-mode differentiation with a fixed layer vocabulary."""

from .tensor import Parameter, Tape, Tensor, backward, set_debug

__all__ = ["Parameter", "Tape", "Tensor", "backward", "set_debug"]
