"""Calibration-board camera ground truth and scale-aware trajectory evaluation."""

__version__ = "0.1.0"
