"""Anchor-to-joint transformer for 3D two-hand pose estimation on numpy."""

__version__ = "0.1.0"
