"""Hierarchical self-supervised discriminative learning on patient -> slide -> patch data."""

__version__ = "0.1.0"
