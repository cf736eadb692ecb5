"""scikit-learn compatible wrapper around the attention quality scorer."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .model_io import ModelConfig, WeightSet, load_config, load_image, load_weights
from .scoring import METRICS, parse_strategy, quality
from .vit import forward_with_capture


def check_images(X, cfg):
    """Validate a batch of images for ``cfg``.

    ``X`` is either an array of preprocessed images shaped ``(n, H, W, 3)``
    or a sequence of PPM paths, which are loaded and normalized.  Returns a
    list of float32 ``(H, W, 3)`` arrays.
    """
    if isinstance(X, (str, os.PathLike)):
        raise TypeError("expected a sequence of images or paths, got a single path")
    if isinstance(X, np.ndarray):
        if X.ndim != 4:
            raise ValueError(f"expected an array of shape (n, H, W, 3), got {X.shape}")
        items = list(X)
    else:
        items = list(X)
    shape = (cfg.image_height, cfg.image_width, 3)
    images = []
    for i, item in enumerate(items):
        if isinstance(item, (str, os.PathLike)):
            images.append(load_image(item, cfg))
            continue
        img = np.asarray(item, dtype=np.float32)
        if img.shape != shape:
            raise ValueError(f"image {i} has shape {img.shape}, expected {shape}")
        if not np.all(np.isfinite(img)):
            raise ValueError(f"image {i} contains non-finite values")
        images.append(img)
    return images


class AttnFIQA(TransformerMixin, BaseEstimator):
    """Training-free face image quality from pre-softmax ViT attention.

    Parameters
    ----------
    config : ModelConfig or path
        Architecture of the ViT; a path is read as a key=value config file.
    weights : WeightSet, mapping or path
        Model weights; a path is read as an AFQW container.
    capture_block : int, optional
        1-based block whose attention is captured. Defaults to the last block.
    strategy : str
        ``"concat"``, ``"avg_of_heads"`` or ``"head_<h>"``.
    metric : str
        One of ``mean``, ``max``, ``median``, ``inv_std``.
    n_jobs : int
        Worker threads used to score a batch.

    ``fit`` learns nothing; it resolves and validates the model so the scorer
    can sit inside a Pipeline.
    """

    def __init__(self, config=None, weights=None, capture_block=None,
                 strategy="concat", metric="mean", n_jobs=1):
        self.config = config
        self.weights = weights
        self.capture_block = capture_block
        self.strategy = strategy
        self.metric = metric
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        cfg = self.config
        if cfg is None:
            raise ValueError("config is required")
        if not isinstance(cfg, ModelConfig):
            cfg = load_config(cfg)
        if self.weights is None:
            raise ValueError("weights are required")
        if isinstance(self.weights, (str, os.PathLike)):
            ws = load_weights(self.weights, cfg)
        else:
            ws = WeightSet(self.weights, cfg)
        block = cfg.num_blocks if self.capture_block is None else int(self.capture_block)
        if not 1 <= block <= cfg.num_blocks:
            raise ValueError(f"capture_block must be in [1, {cfg.num_blocks}]")
        parse_strategy(self.strategy, cfg.num_heads)
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if int(self.n_jobs) < 1:
            raise ValueError("n_jobs must be at least 1")
        self.config_ = cfg
        self.weights_ = ws
        self.capture_block_ = block
        self.n_heads_ = cfg.num_heads
        return self

    def _map(self, fn, items):
        if self.n_jobs == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=int(self.n_jobs)) as pool:
            return list(pool.map(fn, items))

    def capture(self, X):
        """Pre-softmax attention captures, one per image, in input order."""
        check_is_fitted(self, "config_")
        images = check_images(X, self.config_)
        return self._map(
            lambda img: forward_with_capture(img, self.weights_, self.config_, self.capture_block_)[1],
            images)

    def score_samples(self, X):
        """Quality score per image (higher means better quality)."""
        caps = self.capture(X)
        return np.array([quality(c, self.strategy, self.metric).value for c in caps])

    def transform(self, X):
        return self.score_samples(X).reshape(-1, 1)

    def get_feature_names_out(self, input_features=None):
        return np.array(["attn_fiqa_score"], dtype=object)
