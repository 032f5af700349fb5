"""Serialized multi-layer attention speaker embeddings."""
