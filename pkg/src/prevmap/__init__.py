"""Prevalence mapping from routine facility case counts and household surveys."""

__version__ = "0.1.0"
