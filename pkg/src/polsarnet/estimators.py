"""scikit-learn style wrappers around the patch models.

PatchClassifier turns the two-branch networks into a fit/predict
estimator so they drop into sklearn pipelines, grid search, and
cross-validation. The feature transformers cover the channel-space
conversions for callers that keep their data in flat arrays instead of
rasters.

Sample layout: each row is one patch, either shaped (9, s, s) or
flattened to 9*s*s. Channels follow the canonical order of the form
the chosen variant consumes (amplitude/phase or real/imaginary).
"""

from __future__ import annotations

import warnings
from types import SimpleNamespace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .models import build_model, required_form, train_model
from .polsar import N_CHANNELS, PatchSet, phase_angle


class PatchClassifier(BaseEstimator, ClassifierMixin):
    """Multi-task patch classifier with the sklearn estimator protocol.

    Labels may be arbitrary (ints, strings); they are mapped to the
    internal 1-based class ids through ``classes_``. Training is
    deterministic for a fixed ``seed``.
    """

    def __init__(
        self,
        variant="mcnn",
        widths=(32, 64, 64),
        growth=16,
        growth_multiplier=4,
        fc_width=128,
        conv_dropout=0.2,
        fc_dropout=0.5,
        side_weights=(1.0, 1.0, 1.0),
        fusion_width=0,
        patch_size=14,
        epochs=20,
        batch_size=64,
        lr=0.001,
        eval_subsample=0,
        seed=0,
    ):
        self.variant = variant
        self.widths = widths
        self.growth = growth
        self.growth_multiplier = growth_multiplier
        self.fc_width = fc_width
        self.conv_dropout = conv_dropout
        self.fc_dropout = fc_dropout
        self.side_weights = side_weights
        self.fusion_width = fusion_width
        self.patch_size = patch_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.eval_subsample = eval_subsample
        self.seed = seed

    def _shape_input(self, X):
        X = check_array(X, allow_nd=True, dtype=np.float32, order="C")
        s = self.patch_size
        if X.ndim == 2:
            if X.shape[1] != N_CHANNELS * s * s:
                raise ValueError(
                    f"expected {N_CHANNELS * s * s} features per row "
                    f"(9 channels x {s}x{s} patch), got {X.shape[1]}"
                )
            X = X.reshape(X.shape[0], N_CHANNELS, s, s)
        elif X.ndim == 4:
            if X.shape[1:] != (N_CHANNELS, s, s):
                raise ValueError(f"expected samples shaped (9, {s}, {s}), got {X.shape[1:]}")
        else:
            raise ValueError(f"expected a 2-d or 4-d array, got ndim={X.ndim}")
        return X

    def fit(self, X, y):
        X = self._shape_input(X)
        y = column_or_1d(y, warn=True)
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} samples but y has {y.shape[0]}")
        self.classes_, inverse = np.unique(y, return_inverse=True)
        if self.classes_.shape[0] < 2:
            raise ValueError("need at least two classes to fit")
        labels = (inverse + 1).astype(np.int32)

        cfg = SimpleNamespace(
            form=required_form(self.variant),
            widths=tuple(self.widths),
            growth=self.growth,
            growth_multiplier=self.growth_multiplier,
            fc_width=self.fc_width,
            conv_dropout=self.conv_dropout,
            fc_dropout=self.fc_dropout,
            side_weights=tuple(self.side_weights),
            fusion_width=self.fusion_width,
            patch_size=self.patch_size,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            eval_subsample=self.eval_subsample,
            seed=self.seed,
        )
        n_classes = int(self.classes_.shape[0])
        self.model_ = build_model(self.variant, n_classes, cfg, seed=self.seed)
        train = PatchSet(
            patches=X,
            labels=labels,
            coords=np.zeros((X.shape[0], 2), dtype=np.int64),
            n_classes=n_classes,
            class_names=tuple(str(c) for c in self.classes_),
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # tiny fits trip the small-split warning
            _, self.history_ = train_model(self.model_, train, cfg)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = self._shape_input(X)
        return self.model_.predict_proba(X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    @property
    def form(self):
        """Channel form the configured variant consumes."""
        return required_form(self.variant)


class AmplitudePhaseFeatures(TransformerMixin, BaseEstimator):
    """Convert flat real/imag coherency rows to amplitude/phase rows.

    Input rows: (T11, T22, T33, ReT12, ImT12, ReT13, ImT13, ReT23, ImT23).
    Output rows: (T11, T22, T33, |T12|, |T13|, |T23|, argT12, argT13, argT23).
    Stateless; fit only records the feature count.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] % N_CHANNELS != 0:
            raise ValueError(f"feature count must be a multiple of 9, got {X.shape[1]}")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        pixels = X.reshape(X.shape[0], -1, N_CHANNELS)
        out = np.empty_like(pixels)
        out[..., :3] = pixels[..., :3]
        for pos, (re_idx, im_idx) in enumerate(((3, 4), (5, 6), (7, 8))):
            re, im = pixels[..., re_idx], pixels[..., im_idx]
            out[..., 3 + pos] = np.hypot(re, im)
            out[..., 6 + pos] = phase_angle(re, im)
        return out.reshape(X.shape)


class ChannelStandardizer(TransformerMixin, BaseEstimator):
    """Per-column standardization that tolerates constant columns.

    Matches the normalization applied inside the training pipeline:
    constant columns are centered but left unscaled, with a warning.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        dead = std <= 1e-12 * np.maximum(1.0, np.abs(self.mean_))
        if np.any(dead):
            warnings.warn(
                f"columns {np.flatnonzero(dead).tolist()} are constant; centering only",
                RuntimeWarning,
                stacklevel=2,
            )
        self.scale_ = np.where(dead, 1.0, std)
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def transform(self, X):
        X = self._check(X)
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        X = self._check(X)
        return X * self.scale_ + self.mean_


__all__ = [
    "PatchClassifier",
    "AmplitudePhaseFeatures",
    "ChannelStandardizer",
    "NotFittedError",
]
