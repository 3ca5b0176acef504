"""Streaming residual-VQ speech codec with a causal sliding-window transformer."""

__version__ = "0.1.0"
