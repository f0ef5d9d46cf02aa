"""Desk-scale NMT with low-rank adapters, adapter mixing, and continual learning."""

__version__ = "0.1.0"
