"""Continual learning with negative-flip measurement and positive-congruent training."""

__version__ = "0.1.0"
