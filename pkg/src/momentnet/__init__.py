"""Geometric-moment image classifiers with learned coordinate bases."""

__version__ = "0.1.0"
