"""Hard-sphere dynamics and tree-expansion estimators for correlation functions."""

__version__ = "0.1.0"
