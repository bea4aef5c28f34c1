"""Target-trial tooling for multi-cohort causal inference."""

__version__ = "0.1.0"
