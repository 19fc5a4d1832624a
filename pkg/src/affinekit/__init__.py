"""Affiner adapters for frozen diffusion transformers, with a desk-scale harness."""

__version__ = "0.1.0"
