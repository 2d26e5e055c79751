"""Complete verification of ReLU networks by branch and bound over optimized linear bounds."""

__version__ = "0.1.0"
