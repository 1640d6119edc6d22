"""HTTP inference service for colony detection and box-prompted segmentation."""

__version__ = "0.1.0"
