"""Causal algorithmic recourse for score-based anomaly detectors."""
