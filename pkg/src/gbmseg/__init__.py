"""Glioblastoma MRI detection and segmentation: preprocessing, augmentation,
UNet / DeepLabv3 training and evaluation, and a K-means baseline."""

__version__ = "0.1.0"
