"""Goodness-of-fit tests for semiparametric accelerated failure time models."""

__version__ = "0.1.0"
