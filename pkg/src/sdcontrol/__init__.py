"""Numerical laboratory for Carleman weights and null controllability of
one-dimensional stochastic degenerate parabolic equations."""

__version__ = "0.1.0"
