"""Hierarchical label-aware LoRA on a small byte-level transformer."""

__version__ = "0.1.0"
