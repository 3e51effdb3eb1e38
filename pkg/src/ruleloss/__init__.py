"""Neural property regression regularized by matched-pair transformation rules."""

__version__ = "0.1.0"
