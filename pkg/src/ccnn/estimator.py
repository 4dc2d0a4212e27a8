"""scikit-learn style front end.

``CCNNLocalizer`` wraps model construction and training behind
``fit``/``predict``/``score``; ``HeatmapEncoder`` and ``PixelNormalizer``
expose the codec and input normalization as transformers, so the pieces drop
into ``Pipeline`` and ``GridSearchCV``.
"""

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import heatmap as codec
from .geometry import default_convention, normalize_pixels
from .metrics import nle_batch
from .model import CCNNConfig
from .training import DESK_SCHEDULE, AugmentConfig, TrainConfig, predict, train
from .validation import check_consistent_length, check_images, check_landmarks


class CCNNLocalizer(RegressorMixin, BaseEstimator):
    """Cascaded heatmap + regression landmark localizer.

    ``X`` holds normalized ``(n, side, side, 3)`` images and ``y`` pixel
    landmarks ``(n, N, 2)``. Defaults are the desk-scale toy configuration;
    ``input_side=256, channel_scale=1, K=4`` gives the full network.
    """

    def __init__(self, K=2, input_side=64, channel_scale=8, sigma=1.3, epochs=200,
                 lr_schedule=DESK_SCHEDULE, batch_size=16, momentum=0.9, augment=False,
                 validation_fraction=0.1, mode="inter_ocular", random_state=0):
        self.K = K
        self.input_side = input_side
        self.channel_scale = channel_scale
        self.sigma = sigma
        self.epochs = epochs
        self.lr_schedule = lr_schedule
        self.batch_size = batch_size
        self.momentum = momentum
        self.augment = augment
        self.validation_fraction = validation_fraction
        self.mode = mode
        self.random_state = random_state

    def _configs(self, n_points):
        model_cfg = CCNNConfig(K=self.K, input_side=self.input_side,
                               heatmap_side=self.input_side // 4, n_points=n_points,
                               channel_scale=self.channel_scale, sigma=self.sigma)
        train_cfg = TrainConfig(epochs=self.epochs, lr_schedule=self.lr_schedule,
                                batch_size=self.batch_size, momentum=self.momentum,
                                augment=self.augment,
                                augmentation=AugmentConfig() if self.augment else AugmentConfig.none(),
                                seed=self.random_state,
                                validation_fraction=self.validation_fraction)
        return model_cfg, train_cfg

    def fit(self, X, y):
        X = check_images(X, self.input_side)
        y = check_landmarks(y)
        check_consistent_length(X, y)
        self.n_points_ = y.shape[1]
        model_cfg, train_cfg = self._configs(self.n_points_)
        result = train(X, y, model_cfg, train_cfg)
        self.model_ = result.model
        self.training_log_ = result.log
        self.best_epoch_ = result.best_epoch
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.input_side)
        return predict(self.model_, X)

    def predict_heatmaps(self, X):
        """Last cascade heatmaps as channels-last ``(n, S, S, N)`` arrays."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.input_side)
        dtype = next(self.model_.parameters()).dtype
        with torch.no_grad():
            x = torch.from_numpy(np.moveaxis(X, -1, 1).copy()).to(dtype)
            h = self.model_(x).H[-1]
        return np.moveaxis(h.double().numpy(), 1, -1)

    def score(self, X, y, sample_weight=None):
        """Negative mean NLE (higher is better)."""
        y = check_landmarks(y, self.n_points_)
        errors = nle_batch(self.predict(X), y, self.mode, default_convention(self.n_points_))
        return -float(np.average(errors, weights=sample_weight))


class HeatmapEncoder(TransformerMixin, BaseEstimator):
    """Landmarks ``(n, N, 2)`` <-> Gaussian heatmaps ``(n, S, S, N)``."""

    def __init__(self, side=64, sigma=1.3, stride=4.0):
        self.side = side
        self.sigma = sigma
        self.stride = stride

    def fit(self, X, y=None):
        self.n_points_ = check_landmarks(X).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_points_")
        return codec.encode(check_landmarks(X, self.n_points_), self.side, self.sigma, self.stride).grid

    def inverse_transform(self, H):
        return codec.decode(np.asarray(H), self.stride)


class PixelNormalizer(TransformerMixin, BaseEstimator):
    """Map raw pixel values from ``value_range`` onto ``[-0.5, 0.5]``."""

    def __init__(self, value_range=(0, 255)):
        self.value_range = value_range

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return normalize_pixels(X, self.value_range)

    def inverse_transform(self, X):
        lo, hi = self.value_range
        return (np.asarray(X, dtype=np.float64) + 0.5) * (hi - lo) + lo
