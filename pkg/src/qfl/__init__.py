"""Simulation of coherent and measurement-based quantum feedback."""

__version__ = "0.1.0"
