"""Interactive point cloud segmentation with click and augmentation queries."""

__version__ = "0.1.0"
