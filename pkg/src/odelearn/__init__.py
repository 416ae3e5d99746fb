"""Continuous-time ODE identification and model-based control toolkit."""

__version__ = "0.1.0"
