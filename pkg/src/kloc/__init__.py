"""Toy-scale lab for causal tracing and locate-then-edit on a synthetic fact world."""

__version__ = "0.1.0"
