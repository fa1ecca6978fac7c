"""Desk-scale benchmark for identity unlearning in embedding models."""

__version__ = "0.1.0"
