"""Deterministic toy evaluator: interaction clips and texts mapped into one feature space.

The motion branch is a frozen random network whose weights depend only on
``seed``. ``fit`` learns per-channel input standardisation from real clips and
a ridge map from token histograms onto the motion features of the paired
clips, so text features land near the motions they describe.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.linear_model import Ridge
from sklearn.utils.validation import check_is_fitted

from .text import bag_of_tokens


def pair_array(samples) -> np.ndarray:
    """(N, 2, T, J, d) array from interaction samples."""
    return np.stack([np.stack([s.motion_a.data, s.motion_b.data]) for s in samples])


def _as_pairs(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 4:
        X = X[None]
    if X.ndim != 5 or X.shape[1] != 2:
        raise ValueError(f"expected paired clips shaped (N, 2, T, J, d), got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("non-finite values in motion clips")
    return X


class FeatureExtractor(TransformerMixin, BaseEstimator):
    def __init__(self, feature_dim=32, hidden=128, ridge_alpha=1e-2, seed=1234):
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.ridge_alpha = ridge_alpha
        self.seed = seed

    def _frames(self, X: np.ndarray) -> np.ndarray:
        """Per-frame inputs: both persons' features plus the root offset between them."""
        n, _, t = X.shape[:3]
        rel = X[:, 1, :, 0, :3] - X[:, 0, :, 0, :3]
        return np.concatenate([X.transpose(0, 2, 1, 3, 4).reshape(n, t, -1), rel], axis=-1)

    def fit(self, X, texts=None):
        X = _as_pairs(X)
        frames = self._frames(X)
        flat = frames.reshape(-1, frames.shape[-1])
        self.input_mean_ = flat.mean(0)
        self.input_std_ = np.maximum(flat.std(0), 1e-3)
        rng = np.random.default_rng(self.seed)
        d_in = frames.shape[-1]
        self.w_frame_ = rng.standard_normal((d_in, self.hidden)) / np.sqrt(d_in)
        self.b_frame_ = rng.uniform(-0.5, 0.5, self.hidden)
        self.w_out_ = rng.standard_normal((2 * self.hidden, self.feature_dim)) / np.sqrt(2 * self.hidden)
        if texts is not None:
            if len(texts) != len(X):
                raise ValueError(f"{len(texts)} texts for {len(X)} clips")
            self.text_map_ = Ridge(alpha=self.ridge_alpha).fit(bag_of_tokens(texts), self.transform(X))
        return self

    def transform(self, X) -> np.ndarray:
        """(N, feature_dim) motion features; mean and mean absolute change of a random frame embedding."""
        check_is_fitted(self, "w_frame_")
        X = _as_pairs(X)
        frames = (self._frames(X) - self.input_mean_) / self.input_std_
        h = np.tanh(frames @ self.w_frame_ + self.b_frame_)
        pooled = np.concatenate([h.mean(1), 4.0 * np.abs(np.diff(h, axis=1)).mean(1)], axis=-1)
        return pooled @ self.w_out_

    def transform_text(self, texts) -> np.ndarray:
        check_is_fitted(self, "text_map_")
        return self.text_map_.predict(bag_of_tokens(texts))
