"""Numerical engine for max-type measure recursions with renewal and their
continuous-time scaling limit."""

__version__ = "0.1.0"
