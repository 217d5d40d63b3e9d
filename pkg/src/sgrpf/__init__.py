"""Differentiable particle filters built on a scalar reverse-mode AD tape."""

__version__ = "0.1.0"
