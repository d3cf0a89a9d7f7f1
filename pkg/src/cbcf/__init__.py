"""Clustering-based collaborative filtering with an incentive/penalty
decision rule (IPU model)."""

__version__ = "0.1.0"
