"""Conformal prediction bands and risk stratification for randomly-timed
biomarker trajectories."""

__version__ = "0.1.0"
