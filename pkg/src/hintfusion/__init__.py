"""Hint-token fusion for visual tokens, with a desk-scale synthetic testbed."""

__version__ = "0.1.0"
