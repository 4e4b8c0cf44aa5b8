"""Bayesian U-Net damage segmentation on grid-structured monitoring data."""

__version__ = "0.1.0"
