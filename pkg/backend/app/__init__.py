"""Spatially varying snow density engine"""

__version__ = "1.0.0"
