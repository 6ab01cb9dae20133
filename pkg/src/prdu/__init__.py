"""Posterior-regularized dialogue understanding at desk scale."""

__version__ = "0.1.0"
