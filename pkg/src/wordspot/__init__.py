"""Segmentation-free word spotting with region-level PHOC embeddings."""

from .phoc import PhocConfig, encode_string
from .imaging import BBox, GrayImage

__version__ = "0.1.0"

__all__ = ["BBox", "GrayImage", "PhocConfig", "encode_string"]
