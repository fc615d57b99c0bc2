"""Carleman weights, identity checks, and null-control experiments for complex Ginzburg-Landau operators."""

__version__ = "0.1.0"
