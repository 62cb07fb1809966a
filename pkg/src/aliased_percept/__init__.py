"""Probabilistic discriminative regression on aliased tactile data."""

__version__ = "0.1.0"
