"""Depth autoregression with multiway tree bins, at desk scale."""

__version__ = "0.1.0"
