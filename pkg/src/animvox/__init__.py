"""Animatable sparse-voxel volumes: carve, fit, warp, render."""

__version__ = "0.1.0"
