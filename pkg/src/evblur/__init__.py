"""Event-driven sharp-to-blur domain adaptation for multi-person 2D pose estimation."""

__version__ = "0.1.0"

K = 14
