"""Magnetic field models for electromagnetic navigation systems."""

__version__ = "0.1.0"
