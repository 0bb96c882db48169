"""Input validation helpers for the estimator wrappers."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_is_fitted as _sk_check_is_fitted

from .audio import Waveform
from .exceptions import ShapeError


def check_waveforms(X, min_len: int = 1) -> np.ndarray:
    """Coerce Waveforms, 1-D or 2-D arrays into a finite (n, time) float64 matrix."""
    if isinstance(X, Waveform):
        X = X.samples[None]
    elif isinstance(X, (list, tuple)) and X and isinstance(X[0], Waveform):
        lengths = {len(w) for w in X}
        if len(lengths) != 1:
            raise ShapeError(f"waveforms have differing lengths {sorted(lengths)}")
        X = np.stack([w.samples for w in X])
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None]
    if X.ndim != 2:
        raise ShapeError(f"expected (n, time) waveforms, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no waveforms given")
    if X.shape[1] < min_len:
        raise ShapeError(f"waveforms have {X.shape[1]} samples, need at least {min_len}")
    if not np.all(np.isfinite(X)):
        raise ValueError("waveforms contain non-finite samples")
    return X


def check_labels(y, n: int, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integer class indices")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y.astype(np.int64)


def check_is_fitted(estimator):
    _sk_check_is_fitted(estimator, "module_")
