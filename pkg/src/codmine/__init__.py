"""Parameter mining and layer freezing for continual object detection."""

__version__ = "0.1.0"
