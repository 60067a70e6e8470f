"""Connected-vehicle demand estimation and fixed-time signal optimization."""

__version__ = "0.1.0"
