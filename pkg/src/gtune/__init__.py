"""Weakly-supervised grounding of location tokens in cross-attention maps."""

__version__ = "0.1.0"
