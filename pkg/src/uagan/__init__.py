"""Two-stream translation + segmentation GAN for unpaired multimodal images."""

__version__ = "0.1.0"
