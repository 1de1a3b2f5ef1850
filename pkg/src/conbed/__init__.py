"""Constrained sequential experimental design with amortized posteriors and scenario-tree planning."""

__version__ = "0.1.0"
