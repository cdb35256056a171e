"""Fine-grained image-text alignment losses on an independent-embedding backbone."""

__version__ = "0.1.0"
