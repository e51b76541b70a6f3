"""Coronary-artery tree labeling with a conditional partial-residual GCN."""

__version__ = "0.1.0"
