"""Federated encrypted vector search with share splitting and cached encryption."""

__version__ = "0.1.0"
