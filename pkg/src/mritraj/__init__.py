"""Individualized longitudinal volume prediction with a double-encoder CVAE."""

__version__ = "0.1.0"
