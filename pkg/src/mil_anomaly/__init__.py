"""Weakly-supervised video anomaly detection on precomputed clip features."""

__version__ = "0.1.0"
