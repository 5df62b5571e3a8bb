"""RGB-D semantic segmentation with bottom-up interactive fusion, on a numpy autograd core."""

__version__ = "0.1.0"
