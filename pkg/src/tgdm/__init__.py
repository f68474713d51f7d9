"""Two-stage topology-guided deformable Mamba segmentation toolkit."""

__version__ = "0.1.0"
