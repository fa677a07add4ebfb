"""vineskel: skeletal models and pruning-weight prediction for dense grapevines."""

__version__ = "0.1.0"
