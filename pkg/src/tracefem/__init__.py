"""Stabilized trace finite elements on implicitly defined surfaces."""

__version__ = "0.1.0"
