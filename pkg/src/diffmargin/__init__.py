"""Margins of cross-entropy versus differential (pairwise) training."""

__version__ = "0.1.0"
