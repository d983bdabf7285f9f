"""Incremental object-detection laboratory on a synthetic benchmark."""

__version__ = "0.1.0"
