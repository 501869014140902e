"""Region-aware BYOL pre-training on a small numpy substrate."""

__version__ = "0.1.0"
