"""Simulation lab for imitation learning with hidden per-episode contexts."""

__version__ = "0.1.0"
