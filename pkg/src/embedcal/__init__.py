"""Simultaneous calibration of several projectors with cameras embedded in a
planar board, plus the ray-optics rig simulator used to test it."""

__version__ = "0.1.0"
