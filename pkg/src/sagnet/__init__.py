"""Recurrent graph network for river temperature below reservoirs."""

__version__ = "0.1.0"
