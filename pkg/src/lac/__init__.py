"""Skeleton action representation learning with linear action decomposition."""

__version__ = "0.1.0"
