"""Unified offline+streaming transducer training and decoding at desk scale."""

__version__ = "0.1.0"
