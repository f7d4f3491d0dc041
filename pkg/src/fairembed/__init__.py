"""Simulation toolkit for demographic disparity in metric-embedding face obfuscation."""

__version__ = "0.1.0"
