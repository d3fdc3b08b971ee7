"""Sonar image matching enhanced by factor-controlled style transfer and a learned patch descriptor."""

__version__ = "0.1.0"
