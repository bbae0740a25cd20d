"""Batch SE(2) estimation with learned, time-correlated, feature-dependent noise."""

__version__ = "0.1.0"
