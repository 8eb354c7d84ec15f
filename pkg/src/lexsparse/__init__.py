"""Sparse vocabulary-space image-text dual encoder at desk scale."""

__version__ = "0.1.0"
