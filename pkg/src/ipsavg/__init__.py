"""Averaging of spatial birth-death particle systems in a fast ergodic environment."""

__version__ = "0.1.0"
