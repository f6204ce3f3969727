"""Gradient-trained detectors."""
