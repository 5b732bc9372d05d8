"""RegDGCNN drag surrogate: STL ingestion, point clouds, EdgeConv regression."""

__version__ = "0.1.0"
