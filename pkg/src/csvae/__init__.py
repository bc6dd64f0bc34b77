"""Class-specific variational auto-encoder toolkit for content-based image retrieval."""

__version__ = "0.1.0"
