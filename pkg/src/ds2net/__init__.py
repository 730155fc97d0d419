"""Dual-encoder domain adaptation for two-class segmentation, on a numpy autodiff core."""

__version__ = "0.1.0"
