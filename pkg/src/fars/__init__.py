"""Fuzzy velocity-distance reward shaping for simulated gate racing."""

__version__ = "0.1.0"
