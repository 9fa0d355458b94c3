"""Desk-scale encoder-free vision-language training harness."""

__version__ = "0.1.0"
