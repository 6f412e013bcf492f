"""Contrastive material embeddings and retrieval at desk scale."""

__version__ = "0.1.0"
