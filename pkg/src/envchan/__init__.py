"""LiDAR-driven scatterer recognition and environment-embedded vehicular channel synthesis."""

__version__ = "0.1.0"
