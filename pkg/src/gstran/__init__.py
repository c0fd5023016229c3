"""Point-cloud segmentation with local geometric and global semantic transformers."""

__version__ = "0.1.0"
