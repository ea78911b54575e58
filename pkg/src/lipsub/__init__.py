"""Reduced-order deformable simulation on Lipschitz-regularized neural subspaces."""

__version__ = "0.1.0"
