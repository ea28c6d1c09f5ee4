"""Quantization in low-data regimes with filtered synthetic calibration data."""

__version__ = "0.1.0"
