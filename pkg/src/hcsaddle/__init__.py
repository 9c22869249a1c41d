"""Saddle-point solvers for high-contrast P1 finite element problems."""

__version__ = "0.1.0"
