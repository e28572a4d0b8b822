"""BLESS: Bayesian lesion estimation with a structured spike-and-slab prior."""

__version__ = "0.1.0"
