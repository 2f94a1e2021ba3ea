"""Trajectory-synthesis probes for autoregressive models on irregular EMR-style cohorts."""

__version__ = "0.1.0"
