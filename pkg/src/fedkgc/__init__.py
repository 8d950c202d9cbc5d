"""Desk-scale simulator for federated multilingual knowledge-graph completion."""

__version__ = "0.1.0"
