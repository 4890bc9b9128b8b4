"""Resampling detection with a flipout variational CNN and a matched baseline."""

__version__ = "0.1.0"
