"""Shifted power-law modeling of stochastic driving behavior."""

__version__ = "0.1.0"
