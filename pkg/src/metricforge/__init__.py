"""Numerical toolkit for prompt-conditioned metric depth estimation."""

__version__ = "0.1.0"
