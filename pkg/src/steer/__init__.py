"""Confidence-guided step-level routing between a small and a large generator."""

__version__ = "0.1.0"
