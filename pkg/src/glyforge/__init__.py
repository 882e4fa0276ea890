"""Physiology-informed multi-horizon glucose forecasting."""

__version__ = "0.1.0"
