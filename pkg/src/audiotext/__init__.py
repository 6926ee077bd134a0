"""Desk-scale audio-language pre-training laboratory."""

__version__ = "0.1.0"
