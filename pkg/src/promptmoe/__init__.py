"""Routed low-rank soft-prompt tuning on a small frozen causal LM."""

__version__ = "0.1.0"
