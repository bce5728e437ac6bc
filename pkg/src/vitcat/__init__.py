"""Popularity prediction for edge caching with a dual-path ViT and cross-attention fusion."""

__version__ = "0.1.0"
