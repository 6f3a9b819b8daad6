"""Hybrid two-backbone CNN for leaf-disease images, built on numpy."""

__version__ = "0.1.0"
