"""Desk-scale sparse multi-location 4D reconstruction toolkit."""

__version__ = "0.1.0"
