"""Uncertainty-aware deployment toolkit for cross-sectional ranking signals."""

__version__ = "0.1.0"
