# Semi-supervised vessel segmentation across imaging domains
__version__ = "1.0.0"
