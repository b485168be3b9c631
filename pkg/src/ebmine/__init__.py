"""Empirical-Bayes mining of long-short strategy panels."""

__version__ = "0.1.0"
