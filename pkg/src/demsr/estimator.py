"""scikit-learn style wrappers around the network and the interpolation baselines.

Samples are whole grids: ``X`` is a stack ``(n, h, w)`` of low-resolution
elevations in meters and ``y`` the matching ``(n, 16h, 16w)`` stack.
``score`` returns the negated MSE in m^2 so that larger is better.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import interp
from .data import Grid, TilePair, pair_stats
from .exceptions import DimensionError
from .model import build_model, production_config, tiny_config
from .train import TrainConfig, error_report, fit, model_predictor


def check_dem_stack(X, name="X", min_size=1):
    """Return ``X`` as a finite float64 ``(n, h, w)`` stack; a single 2-D grid gets a batch axis."""
    arr = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64, ensure_all_finite=True,
                      input_name=name)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DimensionError(f"{name} must be (n, h, w) or (h, w), got shape {arr.shape}")
    if min(arr.shape[1:]) < min_size:
        raise DimensionError(f"{name} grids must be at least {min_size}x{min_size}, got {arr.shape[1:]}")
    return arr


def check_pair_stacks(X, y, factor=16, min_size=1):
    """Validate aligned LR/HR stacks related by ``factor``."""
    X = check_dem_stack(X, "X", min_size)
    y = check_dem_stack(y, "y", min_size)
    if len(X) != len(y):
        raise DimensionError(f"X has {len(X)} grids but y has {len(y)}")
    if y.shape[1:] != (X.shape[1] * factor, X.shape[2] * factor):
        raise DimensionError(f"y grids {y.shape[1:]} are not {factor}x the X grids {X.shape[1:]}")
    return X, y


def _neg_mse(pred, y):
    return -float(np.mean((np.asarray(pred, dtype=np.float64) - y) ** 2))


class InterpolationUpscaler(TransformerMixin, BaseEstimator):
    """Stateless bicubic or bilinear upscaling."""

    def __init__(self, method="bicubic", factor=16):
        self.method = method
        self.factor = factor

    def fit(self, X, y=None):
        if self.method not in interp.METHODS:
            raise ValueError(f"method must be one of {list(interp.METHODS)}, got {self.method!r}")
        check_dem_stack(X, min_size=2)
        self.fitted_ = True
        return self

    def transform(self, X):
        check_is_fitted(self)
        return interp.upscale(check_dem_stack(X, min_size=2), self.factor, self.method)

    predict = transform

    def score(self, X, y):
        X, y = check_pair_stacks(X, y, self.factor, min_size=2)
        return _neg_mse(self.transform(X), y)


class DEMSuperResolver(RegressorMixin, BaseEstimator):
    def __init__(self, architecture="tiny", tiny_divisor=8, model_seed=0, head_init="skip", up2_init_scale=0.1,
                 skip_interpolation="bicubic", learning_rate=0.001, batch_size=4, max_epochs=100,
                 plateau_patience=10, plateau_factor=0.1, plateau_threshold=1e-4, min_lr=1e-6, seed=0,
                 deterministic=True):
        self.architecture = architecture
        self.tiny_divisor = tiny_divisor
        self.model_seed = model_seed
        self.head_init = head_init
        self.up2_init_scale = up2_init_scale
        self.skip_interpolation = skip_interpolation
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.plateau_patience = plateau_patience
        self.plateau_factor = plateau_factor
        self.plateau_threshold = plateau_threshold
        self.min_lr = min_lr
        self.seed = seed
        self.deterministic = deterministic

    def _model_config(self):
        kw = dict(seed=self.model_seed, head_init=self.head_init, up2_init_scale=self.up2_init_scale,
                  skip_interpolation=self.skip_interpolation)
        if self.architecture == "tiny":
            return tiny_config(divisor=self.tiny_divisor, **kw)
        if self.architecture == "production":
            return production_config(**kw)
        raise ValueError(f"architecture must be tiny or production, got {self.architecture!r}")

    def _train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size, max_epochs=self.max_epochs,
            plateau_patience=self.plateau_patience, plateau_factor=self.plateau_factor,
            plateau_threshold=self.plateau_threshold, min_lr=self.min_lr, seed=self.seed,
            deterministic=self.deterministic,
        ).validate()

    def fit(self, X, y):
        model_cfg = self._model_config()
        X, y = check_pair_stacks(X, y, model_cfg.scale_factor, min_size=3)
        pairs = [TilePair(f"sample{i}", Grid(X[i]), Grid(y[i])) for i in range(len(X))]
        self.model_ = build_model(model_cfg)
        result = fit(self.model_, pairs, self._train_config(), stats=pair_stats(pairs))
        self.stats_ = result.stats
        self.history_ = result.history
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return model_predictor(self.model_, self.stats_)(check_dem_stack(X, min_size=3))

    def score(self, X, y):
        check_is_fitted(self, "model_")
        X, y = check_pair_stacks(X, y, self.model_.config.scale_factor, min_size=3)
        return _neg_mse(self.predict(X), y)

    def error_report(self, X, y, bins=50):
        """Per-pixel error summary in meters for held-out stacks."""
        check_is_fitted(self, "model_")
        X, y = check_pair_stacks(X, y, self.model_.config.scale_factor, min_size=3)
        return error_report(self.predict(X), y, bins=bins)
