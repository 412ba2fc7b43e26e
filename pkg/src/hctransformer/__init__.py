"""Human-centric transformer for domain adaptive action recognition, on a numpy autodiff core."""

__version__ = "0.1.0"
