"""Learned per-layer SVD rank allocation for small language models."""

from ._tuning import tune_allocator

tune_allocator()

__version__ = "0.1.0"
