"""Layer-wise differentiated network architectures: widen, reparameterize, shrink, retrain."""

__version__ = "1.0.0"
