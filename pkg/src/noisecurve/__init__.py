"""Noise-robust feature learning with centroid losses, curvature probes and checks."""

__version__ = "0.1.0"
