"""Semi-supervised image classification with complement (bad) and triple (good) GANs."""

__version__ = "0.1.0"
