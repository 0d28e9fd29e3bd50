"""Continual learning for a toy anchor-free detector with a DFL regression head."""

__version__ = "0.1.0"
