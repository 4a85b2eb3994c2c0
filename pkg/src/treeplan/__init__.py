"""Tree-search trajectory generation with a learned trajectory scorer for 1-D longitudinal planning."""

__version__ = "0.1.0"
