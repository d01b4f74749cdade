"""Feature extraction and encoder bridge for the oodkit evaluation engine."""

from .backbones import build_backbone
from .datasets import load_dataset
from .extract import extract_features, zero_shot_logits

__version__ = "0.1.0"

__all__ = ["build_backbone", "load_dataset", "extract_features",
           "zero_shot_logits"]
