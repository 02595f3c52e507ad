"""Unsupervised water-extent mapping from SAR time series and gauge levels."""

__version__ = "0.1.0"
