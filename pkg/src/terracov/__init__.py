"""Learned terrain-texture covariates from a DEM, with OLS and kriging baselines."""

__version__ = "0.1.0"
