"""Late-fusion siamese retrieval over whole-image and region feature vectors."""

__version__ = "0.1.0"
