"""Embedding trajectories for discrete-time dynamic graphs."""

__version__ = "0.1.0"
