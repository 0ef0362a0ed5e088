"""Semi-supervised multi-task retinal image quality toolkit."""

__version__ = "0.1.0"
