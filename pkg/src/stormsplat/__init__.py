"""Spatiotemporally coherent Gaussian reconstruction and forecasting of 3-D radar echo."""

__version__ = "0.1.0"
