"""Saccade/fixation state-space referring segmentation, desk scale."""

__version__ = "0.1.0"
