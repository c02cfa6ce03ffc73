"""Stochastic human reaching model, inverse identification and variability-respecting assistance."""

__version__ = "0.1.0"
