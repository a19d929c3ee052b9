"""Joint 3D UNet / graph neural network segmentation of tree structures."""
__version__ = "0.1.0"
