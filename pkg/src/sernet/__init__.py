"""Desk-scale SERNet-Former: attention-boosted encoder-decoder segmentation in numpy."""

__version__ = "0.1.0"
