"""Map-fused bird's-eye-view lidar object detection on synthetic scenes."""

__version__ = "0.1.0"
