"""Multi-task residual network for crowd counting, violent behaviour detection
and density level classification, with its training and evaluation pipeline."""

__version__ = "0.1.0"
