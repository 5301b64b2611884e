"""Dense passage retrieval pre-training with expanded-query contexts."""

__version__ = "0.1.0"
