"""Doubly-stochastic meta-learning with linearly competing units."""

__version__ = "0.1.0"
