"""Model-based and learning-aided Kalman filtering of bounding boxes."""

__version__ = "0.1.0"
