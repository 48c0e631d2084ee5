"""Multimodal instance segmentation with residual cross-modality attention
fusion, built on a small numpy autodiff engine."""

__version__ = "0.1.0"
