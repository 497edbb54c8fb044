"""Recognizing letters written on a surface or in mid-air from accelerometer data."""

__version__ = "0.1.0"
