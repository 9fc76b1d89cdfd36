"""Geometry-consistent one-sided unpaired image translation."""

__version__ = "0.1.0"
