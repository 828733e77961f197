"""Exceptional-point spectroscopy of driven dissipative atomic models."""
__version__ = "0.1.0"
