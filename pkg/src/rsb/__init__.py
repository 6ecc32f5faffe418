"""Reflected Schrodinger bridges on bounded domains."""
__version__ = "0.1.0"
