"""Face image quality assessment from pre-softmax Vision Transformer attention."""

__version__ = "0.1.0"

from .estimator import AttnFIQA, check_images
from .model_io import ModelConfig, WeightSet, load_config, load_image, load_weights, save_weights
from .scoring import (aggregate, avg_of_heads_quality, concat_quality, flatten_attention,
                      normalize_scores, per_head_quality, quality)
from .vit import AttentionCapture, forward_with_capture

__all__ = [
    "AttnFIQA", "AttentionCapture", "ModelConfig", "WeightSet", "aggregate",
    "avg_of_heads_quality", "check_images", "concat_quality", "flatten_attention",
    "forward_with_capture", "load_config", "load_image", "load_weights",
    "normalize_scores", "per_head_quality", "quality", "save_weights",
]
