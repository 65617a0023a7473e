"""Masked scene modeling: self-supervised hierarchical features for 3D point-cloud scenes."""

__version__ = "0.1.0"
