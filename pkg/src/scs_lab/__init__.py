"""Desk-scale lab for training multi-class LiDAR detectors from single-class labels."""

__version__ = "0.1.0"
