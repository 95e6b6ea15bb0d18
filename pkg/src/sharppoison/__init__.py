"""Sharpness-aware data poisoning toolkit on a small numpy network core."""

__version__ = "0.1.0"
