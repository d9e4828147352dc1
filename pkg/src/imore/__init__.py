"""Interpretable motion reasoning: program DSL, synthetic motions, symbolic oracle and a neural executor."""

__version__ = "0.1.0"
