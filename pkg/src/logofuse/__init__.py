"""Text-assisted logo embeddings: cross-attention fusion, ArcFace training, text-free retrieval."""

__version__ = "0.1.0"
