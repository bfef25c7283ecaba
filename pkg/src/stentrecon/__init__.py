"""Volumetric reconstruction of bioresorbable stents from OCT pullbacks."""

__version__ = "0.1.0"
