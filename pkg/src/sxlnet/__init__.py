"""Permutation-based autoregressive pretraining for self-attention acoustic encoders."""

__version__ = "0.1.0"
