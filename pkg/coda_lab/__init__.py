"""
Semi-supervised segmentation lab: two co-trained per-pixel segmenters with class-wise
distribution alignment and an over-expectation pseudo-label filter.
"""

__version__ = "0.1.0"
