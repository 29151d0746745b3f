"""Temporal modeling and factor analysis of dock-based bike-share usage."""

__version__ = "0.1.0"
