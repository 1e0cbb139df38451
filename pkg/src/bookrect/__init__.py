"""Dual-page book image rectification toolkit."""

__version__ = "0.1.0"
