"""Cryptographic distribution provenance for package artifacts."""

__version__ = "0.1.0"
