"""Vision Transformer over a CNN feature corpus, with PCAM-pooled backbone pre-training."""

__version__ = "0.1.0"
