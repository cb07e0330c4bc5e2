"""Noise-aware music equalisation driven by simultaneous masking."""

__version__ = "0.1.0"
