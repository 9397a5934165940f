"""Pyramid pixel-wise supervision for face anti-spoofing, framework-free."""

__version__ = "0.1.0"
