"""Semantic Image Attack toolkit on a verifiable synthetic domain."""

__version__ = "0.1.0"
