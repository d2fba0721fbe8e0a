"""Referring-phrase segmentation dataset tooling and a small grounding model."""

__version__ = "0.1.0"
