"""Online non-parametric test-time adaptation: KNN voting over a feature memory."""

__version__ = "0.1.0"
