"""Gridded short-range wind forecasting with an attention-based 3D conv encoder-decoder."""

__version__ = "0.1.0"
