"""Quad-directional mixing for domain-adaptive video segmentation, at desk scale."""

__version__ = "0.1.0"
