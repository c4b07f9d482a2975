"""Absorbing-state discrete diffusion over multi-level (RVQ) token grids."""

__version__ = "0.1.0"
