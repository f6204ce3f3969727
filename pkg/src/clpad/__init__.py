"""Continual pixel-level anomaly detection."""
__version__ = "0.1.0"
