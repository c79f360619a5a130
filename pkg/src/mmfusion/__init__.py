"""Multimodal classification with graph-compressed hidden states and gated fusion."""

__version__ = "0.1.0"
