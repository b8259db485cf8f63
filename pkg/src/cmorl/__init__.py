"""Constrained multi-objective RL toolkit."""

__version__ = "0.1.0"
