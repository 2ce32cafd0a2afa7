"""Circular beta-ensembles, circular Dyson Brownian motion and Stein-method checks."""
__version__ = "0.1.0"
