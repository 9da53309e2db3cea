"""Graph recommenders with hop-sampling regularization for non-stationary interaction streams."""

__version__ = "0.1.0"
