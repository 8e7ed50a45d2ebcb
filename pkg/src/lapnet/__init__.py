"""Lightweight attention-based hourglass pose estimation, from scratch in numpy."""

__version__ = "0.1.0"
