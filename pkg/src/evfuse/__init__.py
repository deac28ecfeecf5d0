"""Evidential uncertainty and Dempster-Shafer fusion for bimodal segmentation."""

__version__ = "0.1.0"
