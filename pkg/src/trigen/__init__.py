"""Joint camera-pose and triplane radiance-field optimization."""

__version__ = "0.1.0"
