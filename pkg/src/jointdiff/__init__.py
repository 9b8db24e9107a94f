"""Joint image/mask diffusion for segmentation data augmentation."""

__version__ = "0.1.0"
