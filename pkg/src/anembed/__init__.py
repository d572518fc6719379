"""Attributed network embedding with early fusion of structure and attributes."""

__version__ = "0.1.0"
