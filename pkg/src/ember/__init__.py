"""Embedded-model quantile forests for spatial envelopes and conditional simulation."""

__version__ = "0.1.0"
