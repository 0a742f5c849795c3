"""Extremes of order statistics of self-similar Gaussian and skew-Gaussian
processes: simulation, path functionals, asymptotic formulas and Monte-Carlo
checks."""

__version__ = "0.1.0"
