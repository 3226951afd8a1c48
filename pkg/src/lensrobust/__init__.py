"""Locality-sensitive robustness metrics for attribution maps, with a toy
classifier, attributional attacks and an experiment harness."""

__version__ = "0.1.0"
