"""Exact particle simulation of density-regulated spatial populations and their Fleming-Viot limits."""

__version__ = "0.1.0"
