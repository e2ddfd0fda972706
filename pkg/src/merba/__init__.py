"""Desk-scale MERba: windowed multi-scan SSM stages with a coarse-to-fine head."""
__version__ = "0.1.0"
