"""Graph-based anomaly scoring for multivariate sensor series."""

__version__ = "0.1.0"
