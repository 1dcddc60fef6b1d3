"""Analytic eigenbranches of Delta + t A + t^2 V on the circle in the semi-classical limit."""

__version__ = "0.1.0"
