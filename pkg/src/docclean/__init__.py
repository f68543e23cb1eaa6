"""Unsupervised learning of recurring patterns in corrupted documents, and cleaning."""
__version__ = "0.1.0"
