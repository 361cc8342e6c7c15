"""Sparse-attention CTR modeling over long user behavior sequences."""

__version__ = "0.1.0"
