"""Frequency-domain fragment fusion (F-Learn) and its space-domain baselines."""

__version__ = "0.1.0"
