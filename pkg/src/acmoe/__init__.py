"""Adaptive-clustering routing for sparse mixture-of-experts, with numerical checks."""

__version__ = "0.1.0"
