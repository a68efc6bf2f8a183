"""Sparse causal-effect estimation with inverse-probability weighting and its selection criteria."""

__version__ = "0.1.0"
