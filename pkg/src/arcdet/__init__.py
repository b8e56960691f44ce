"""Aspect-ratio and context aware detection head engine."""

__version__ = "0.1.0"
