"""scikit-learn style wrappers: a window-to-frame transformer and the classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import kernel
from .exceptions import DimensionError
from .frames import ChannelStats, FrameLayout, segment_means
from .model import ModelConfig
from .training import TrainConfig, _split_validation, fit_network, predict_proba


def check_windows(X) -> np.ndarray:
    """Validate ``(n, L, N_r, 3)`` sensor windows."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise DimensionError(f"windows must have shape (n, length, rows, 3), got {X.shape}")
    return X


def check_frames(X) -> np.ndarray:
    """Validate ``(n, F, H, W)`` frame samples."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 4:
        raise DimensionError(f"samples must have shape (n, frames, height, width), got {X.shape}")
    return X


class ActivityFrameTransformer(TransformerMixin, BaseEstimator):
    """Turn raw sensor windows into (optionally standardized) activity frames.

    ``fit`` learns per-channel mean and std from the training windows;
    ``transform`` averages each window into ``n_frames`` segments,
    standardizes them and lays them out as activity frames. With
    ``stacked=True`` the plain ``N_r x 3`` rows are kept instead.
    """

    def __init__(self, n_frames: int = 5, normalize: bool = True, stacked: bool = False):
        self.n_frames = n_frames
        self.normalize = normalize
        self.stacked = stacked

    def _segments(self, X):
        return np.stack([segment_means(w, self.n_frames) for w in X])

    def fit(self, X, y=None):
        X = check_windows(X)
        self.n_rows_ = X.shape[2]
        self.row_labels_ = [f"row{k}" for k in range(self.n_rows_)]
        self.layout_ = FrameLayout.stacked(self.n_rows_) if self.stacked else FrameLayout.for_rows(self.n_rows_)
        self.stats_ = ChannelStats.fit(self._segments(X), self.row_labels_) if self.normalize else None
        return self

    def transform(self, X):
        check_is_fitted(self, "layout_")
        X = check_windows(X)
        if X.shape[2] != self.n_rows_:
            raise DimensionError(f"fitted on {self.n_rows_} rows, got {X.shape[2]}")
        snaps = self._segments(X)
        if self.stats_ is not None:
            snaps = self.stats_.normalize_snapshots(snaps, self.row_labels_)
        return self.layout_.apply(snaps)


class RAAFClassifier(ClassifierMixin, BaseEstimator):
    """Attention classifier over activity-frame samples ``(n, F, H, W)``.

    The number of frames and the frame shape are taken from the data in
    ``fit``. ``random_state`` fixes initialization, sampling and the
    validation split, so repeated fits are bit-identical.
    """

    def __init__(self, n_glimpses=30, n_copies=20, conv_channels=(8, 8), pool_stages=(True, True),
                 glimpse_window=None, n_scales=3, scale_factor=2, dim_what=128, dim_g=220,
                 hidden_attention=100, hidden_frame=1000, sigma2=0.22, frame_input="hidden",
                 location_mode="policy", greedy_eval=False, lr=1e-3, momentum=0.9, grad_clip=5.0,
                 epochs=100, batch_size=32, micro_batch=4, reinforce=True, baseline=True,
                 baseline_decay=0.9, action_weight=1.0, validation_fraction=0.1, patience=10,
                 early_stopping=True, random_state=0):
        self.n_glimpses = n_glimpses
        self.n_copies = n_copies
        self.conv_channels = conv_channels
        self.pool_stages = pool_stages
        self.glimpse_window = glimpse_window
        self.n_scales = n_scales
        self.scale_factor = scale_factor
        self.dim_what = dim_what
        self.dim_g = dim_g
        self.hidden_attention = hidden_attention
        self.hidden_frame = hidden_frame
        self.sigma2 = sigma2
        self.frame_input = frame_input
        self.location_mode = location_mode
        self.greedy_eval = greedy_eval
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.epochs = epochs
        self.batch_size = batch_size
        self.micro_batch = micro_batch
        self.reinforce = reinforce
        self.baseline = baseline
        self.baseline_decay = baseline_decay
        self.action_weight = action_weight
        self.validation_fraction = validation_fraction
        self.patience = patience
        self.early_stopping = early_stopping
        self.random_state = random_state

    _MODEL_KEYS = ("n_glimpses", "n_copies", "conv_channels", "pool_stages", "glimpse_window", "n_scales",
                   "scale_factor", "dim_what", "dim_g", "hidden_attention", "hidden_frame", "sigma2",
                   "frame_input", "location_mode", "greedy_eval")
    _TRAIN_KEYS = ("lr", "momentum", "grad_clip", "epochs", "batch_size", "micro_batch", "reinforce",
                   "baseline", "baseline_decay", "action_weight", "validation_fraction", "patience",
                   "early_stopping")

    def _configs(self, X, n_classes):
        model = ModelConfig(frame_shape=X.shape[2:], n_classes=n_classes, n_frames=X.shape[1],
                            **{k: getattr(self, k) for k in self._MODEL_KEYS})
        train = TrainConfig(seed=int(self.random_state), **{k: getattr(self, k) for k in self._TRAIN_KEYS})
        return model, train

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
        X = check_frames(X)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        model_cfg, train_cfg = self._configs(X, len(self.classes_))
        idx = np.arange(len(y_enc))
        fit_idx, val_idx = _split_validation(idx, self.validation_fraction, kernel.make_rng(train_cfg.seed))
        has_val = len(val_idx) > 0
        result = fit_network(X[fit_idx], y_enc[fit_idx], model_cfg, train_cfg,
                             X[val_idx] if has_val else None, y_enc[val_idx] if has_val else None)
        self.network_ = result.net
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = check_frames(X)
        return predict_proba(self.network_, X, kernel.make_rng(int(self.random_state) + 2))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
