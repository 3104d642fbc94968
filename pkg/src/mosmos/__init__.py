"""Two-stage vision-language pre-training and segmentation fine-tuning on synthetic organs."""

__version__ = "0.1.0"
