"""Semi-supervised knowledge distillation for binary road segmentation."""

__version__ = "0.1.0"
