"""Differentiable 2-D urban wind simulation and building-layout optimization."""

__version__ = "0.1.0"
