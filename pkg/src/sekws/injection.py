"""Audio injection and per-utterance soft switching.

Injection mixes the enhanced and original signals as
``alpha * enhanced + (1 - alpha) * original``. The soft-switch model
predicts ``alpha`` per utterance as the expectation of a softmax over a
fixed grid of candidate weights, which keeps it differentiable end to end.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, RegressorMixin
from torch import nn

from . import datamix
from .audio import FeatureConfig, LogMel, Waveform, as_array
from .exceptions import DomainError, ShapeError
from .training import minibatches, run_sgd, set_deterministic
from .validation import check_is_fitted, check_labels, check_waveforms


def inject(enhanced, original, alpha: float):
    """``alpha * enhanced + (1 - alpha) * original``; the endpoints return exact copies."""
    e, x = as_array(enhanced), as_array(original)
    if e.shape != x.shape:
        raise ShapeError(f"enhanced shape {e.shape} != original shape {x.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha={alpha} outside [0, 1]")
    if alpha == 0.0:
        out = x.copy()
    elif alpha == 1.0:
        out = e.copy()
    else:
        out = alpha * e + (1.0 - alpha) * x
    if isinstance(original, Waveform):
        return original.with_samples(out)
    return out


@dataclass(frozen=True)
class AlphaGrid:
    values: tuple = tuple(np.round(np.linspace(0.0, 1.0, 21), 10))
    require_endpoints: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("alpha grid must be a non-empty 1-D sequence")
        if np.any(np.diff(v) <= 0):
            raise ValueError("alpha grid must be strictly increasing")
        if v[0] < 0.0 or v[-1] > 1.0:
            raise ValueError("alpha grid values must lie in [0, 1]")
        if self.require_endpoints and (v[0] != 0.0 or v[-1] != 1.0):
            raise ValueError("alpha grid must include 0 and 1")
        object.__setattr__(self, "values", tuple(float(a) for a in v))

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)


class AttentionPooling(nn.Module):
    """Weighted mean over time with weights from a learned query."""

    def __init__(self, dim, attn_dim=None):
        super().__init__()
        self.proj = nn.Linear(dim, attn_dim or dim)
        self.query = nn.Parameter(torch.randn(attn_dim or dim) / (attn_dim or dim) ** 0.5)

    def forward(self, h):
        scores = torch.tanh(self.proj(h)) @ self.query
        weights = torch.softmax(scores, dim=1)
        return (weights[..., None] * h).sum(1)


class SwitchNet(nn.Module):
    """(original, enhanced) waveform pair -> distribution over the alpha grid.

    Log-mel features of both signals are concatenated per frame and fed to
    stacked bidirectional LSTMs, attention pooling, two fully connected
    layers and a softmax head.
    """

    def __init__(self, grid: AlphaGrid | None = None, fc: FeatureConfig | None = None,
                 hidden: int = 32, n_layers: int = 3):
        super().__init__()
        grid = grid or AlphaGrid()
        self.features = LogMel(fc or FeatureConfig(n_mels=64))
        n_mels = self.features.fc.n_mels
        self.register_buffer("grid", torch.tensor(grid.values, dtype=torch.float64))
        self.blstm = nn.LSTM(2 * n_mels, hidden, num_layers=n_layers, batch_first=True,
                             bidirectional=True)
        self.pool = AttentionPooling(2 * hidden, hidden)
        self.fc1 = nn.Linear(2 * hidden, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.head = nn.Linear(hidden, len(grid))

    def _feats(self, x):
        f = self.features(x)
        return (f - f.mean(dim=(1, 2), keepdim=True)) / (f.std(dim=(1, 2), keepdim=True) + 1e-5)

    def distribution(self, original, enhanced):
        h, _ = self.blstm(torch.cat([self._feats(original), self._feats(enhanced)], dim=-1))
        z = F.relu(self.fc2(F.relu(self.fc1(self.pool(h)))))
        return torch.softmax(self.head(z), dim=-1)

    def forward(self, original, enhanced):
        return self.distribution(original, enhanced) @ self.grid.to(original.dtype)


def predict_alpha(original, enhanced, model: SwitchNet) -> float:
    """Predicted injection weight for one utterance; always within the grid range."""
    x, e = as_array(original), as_array(enhanced)
    if x.shape != e.shape:
        raise ShapeError(f"original shape {x.shape} != enhanced shape {e.shape}")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        a = model(torch.tensor(x, dtype=dtype)[None], torch.tensor(e, dtype=dtype)[None])
    return float(a[0])


def _enhance(enhancer, X):
    """Enhanced copies of ``X``; ``None`` means the identity frontend."""
    if enhancer is None:
        return X.copy()
    return enhancer.transform(X)


def sweep_alpha(enhancer, spotter, X, y, grid: AlphaGrid | None = None,
                X_enhanced=None) -> list[tuple[float, float]]:
    """(alpha, accuracy) rows in grid order for injected inputs.

    ``X`` is enhanced once and every grid point reuses that output; the
    alpha=0 row therefore scores exactly the unprocessed inputs.
    """
    grid = grid or AlphaGrid()
    X = check_waveforms(X)
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("sweep needs a non-empty dataset")
    enhanced = _enhance(enhancer, X) if X_enhanced is None else np.asarray(X_enhanced)
    return [(a, spotter.score(inject(enhanced, X, a), y)) for a in grid]


def write_sweep_csv(path, rows, split: str, configuration: str = "default",
                    append: bool = False) -> Path:
    """CSV with header ``alpha,split,accuracy,configuration``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["alpha", "split", "accuracy", "configuration"])
        for alpha, acc in rows:
            writer.writerow([repr(float(alpha)), split, repr(float(acc)), configuration])
    return path


class SoftSwitch(RegressorMixin, BaseEstimator):
    """Per-utterance injection-weight predictor.

    ``fit(X, y, enhancer=..., spotter=...)`` trains on noisy inputs ``X`` and
    keyword labels ``y`` by minimizing the frozen spotter's cross-entropy on
    the injected signal. ``predict`` returns one alpha per row of ``X``.
    """

    def __init__(self, grid=None, n_mels=64, window_len=400, hop=160, n_fft=None, hidden=32,
                 n_layers=3, epochs=20, peak_lr=0.01, warmup_epochs=2, momentum=0.9,
                 weight_decay=1e-3, batch_size=16, dtype="float32", random_state=0):
        self.grid = grid
        self.n_mels = n_mels
        self.window_len = window_len
        self.hop = hop
        self.n_fft = n_fft
        self.hidden = hidden
        self.n_layers = n_layers
        self.epochs = epochs
        self.peak_lr = peak_lr
        self.warmup_epochs = warmup_epochs
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.dtype = dtype
        self.random_state = random_state

    @property
    def alpha_grid(self) -> AlphaGrid:
        if self.grid is None:
            return AlphaGrid()
        if isinstance(self.grid, AlphaGrid):
            return self.grid
        return AlphaGrid(tuple(self.grid), require_endpoints=False)

    def initialize(self):
        torch.manual_seed(self.random_state)
        fc = FeatureConfig(self.n_mels, self.window_len, self.hop, n_fft=self.n_fft)
        self.module_ = SwitchNet(self.alpha_grid, fc, self.hidden, self.n_layers)
        self.module_.to(getattr(torch, self.dtype)).eval()
        self.history_ = []
        return self

    def fit(self, X, y, *, enhancer=None, spotter=None, X_enhanced=None, eval_set=None,
            log=None):
        if spotter is None:
            raise ValueError("fit needs a fitted spotter")
        X = check_waveforms(X, min_len=self.window_len)
        y = check_labels(y, len(X), spotter.module_.head.out_features)
        set_deterministic(self.random_state)
        self.initialize()
        train_switch(self, enhancer, spotter, X, y, epochs=self.epochs, lr=self.peak_lr,
                     X_enhanced=X_enhanced, eval_set=eval_set, log=log)
        return self

    def predict(self, X, X_enhanced=None, enhancer=None):
        check_is_fitted(self)
        X = check_waveforms(X, min_len=self.window_len)
        E = _enhance(enhancer, X) if X_enhanced is None else check_waveforms(X_enhanced)
        if E.shape != X.shape:
            raise ShapeError(f"enhanced shape {E.shape} != original shape {X.shape}")
        dtype = next(self.module_.parameters()).dtype
        with torch.no_grad():
            a = self.module_(torch.as_tensor(X, dtype=dtype), torch.as_tensor(E, dtype=dtype))
        return a.double().numpy()

    def transform(self, X, X_enhanced=None, enhancer=None):
        """Injected signals using the predicted per-utterance weights."""
        X = check_waveforms(X, min_len=self.window_len)
        E = _enhance(enhancer, X) if X_enhanced is None else check_waveforms(X_enhanced)
        alphas = self.predict(X, E)
        return alphas[:, None] * E + (1.0 - alphas[:, None]) * X

    def score(self, X, y, sample_weight=None, *, spotter=None, X_enhanced=None, enhancer=None):
        """Spotter accuracy on the soft-switched inputs when ``spotter`` is given."""
        if spotter is None:
            return super().score(X, y, sample_weight)
        return spotter.score(self.transform(X, X_enhanced, enhancer), y)


def train_switch(switch: SoftSwitch, enhancer, spotter, X, y, epochs: int, lr: float,
                 X_enhanced=None, eval_set=None, log=None) -> SoftSwitch:
    """Train ``switch`` through the injection with the spotter's cross-entropy.

    The enhancer output is computed once without gradients and the spotter's
    parameters are held frozen, so only the switch is updated.
    """
    check_is_fitted(switch)
    X = check_waveforms(X, min_len=switch.window_len)
    y = np.asarray(y, dtype=np.int64)
    E = _enhance(enhancer, X) if X_enhanced is None else check_waveforms(X_enhanced)
    kws = spotter.module_
    was = [p.requires_grad for p in kws.parameters()]
    for p in kws.parameters():
        p.requires_grad_(False)
    kws.eval()
    dtype = next(switch.module_.parameters()).dtype
    kws_dtype = next(kws.parameters()).dtype
    Xt, Et = torch.as_tensor(X, dtype=dtype), torch.as_tensor(E, dtype=dtype)
    labels = torch.as_tensor(y)

    def epoch_batches(epoch):
        rng = datamix.worker_rng(switch.random_state, 2, epoch)
        for idx in minibatches(len(X), switch.batch_size, rng):
            yield Xt[idx], Et[idx], labels[idx]

    def loss_fn(batch):
        x, e, target = batch
        alpha = switch.module_(x, e)[:, None]
        mixed = (alpha * e + (1.0 - alpha) * x).to(kws_dtype)
        return F.cross_entropy(kws(mixed), target)

    validate = None
    if eval_set is not None:
        Xv, yv = eval_set[0], eval_set[1]
        Ev = _enhance(enhancer, check_waveforms(Xv)) if len(eval_set) < 3 else eval_set[2]
        validate = lambda: switch.score(Xv, yv, spotter=spotter, X_enhanced=Ev)
    try:
        result = run_sgd(switch.module_, epoch_batches, loss_fn, epochs=epochs, peak_lr=lr,
                         warmup_epochs=min(switch.warmup_epochs, max(epochs - 1, 0)),
                         momentum=switch.momentum, weight_decay=switch.weight_decay,
                         validate=validate, higher_is_better=True, log=log)
    finally:
        for p, flag in zip(kws.parameters(), was):
            p.requires_grad_(flag)
    switch.history_ = result.history
    switch.best_epoch_ = result.best_epoch
    return switch
