"""Bayesian g-computation for a binary outcome, binary treatment and binary
confounders, using saturated (BSAT) and partially saturated (PSM) conjugate
outcome models."""

__version__ = "0.1.0"
