"""Self-supervised pretraining of text encoders on text-attributed graphs."""

from .graph import TagGraph, build_khop_index, generate_synthetic_tag, load_tag, save_tag
from .losses import ContrastBatch, LossConfig, total_loss

__all__ = [
    "ContrastBatch",
    "LossConfig",
    "TagGraph",
    "build_khop_index",
    "generate_synthetic_tag",
    "load_tag",
    "save_tag",
    "total_loss",
]

__version__ = "0.1.0"
