"""Magnetic block assembly benchmark: environment, agents, and training."""

__version__ = "0.1.0"
