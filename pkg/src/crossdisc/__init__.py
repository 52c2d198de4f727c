"""Motion-guided cross-modal multi-object discovery on RGB and LiDAR front views."""
__version__ = "0.1.0"
