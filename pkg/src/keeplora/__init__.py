"""Continual learning with low-rank adapters confined to a residual subspace."""

__version__ = "0.1.0"
