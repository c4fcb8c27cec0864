"""Weakly supervised disaggregation of regional crop yields."""

__version__ = "0.1.0"
