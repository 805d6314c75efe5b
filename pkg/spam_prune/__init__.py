"""Sparse networks from marginal-likelihood priors: training, pruning and compaction."""

__version__ = "0.1.0"
