"""Desk-scale multi-view diffusion sampling with decomposed guidance."""

__version__ = "0.1.0"
