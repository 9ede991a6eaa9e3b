"""Image-based treatment effect heterogeneity models and benchmark tools."""

__version__ = "0.1.0"
