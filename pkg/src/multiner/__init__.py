"""Desk-scale multilingual named entity recognition toolkit."""

__version__ = "0.1.0"
