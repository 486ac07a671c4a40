"""Penalty-kick direction anticipation from action-recognition embeddings and metadata."""

__version__ = "0.1.0"
