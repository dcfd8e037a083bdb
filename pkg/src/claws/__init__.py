"""Weakly supervised anomaly scoring over per-segment video features."""

__version__ = "0.1.0"
