"""Generalized plus balanced-specialized networks for zero-shot learning, at desk scale."""

__version__ = "0.1.0"
