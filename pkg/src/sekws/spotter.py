"""Keyword classifier: log-mel frontend and a small residual conv net over 12 classes."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from torch import nn

from . import datamix
from .audio import FeatureConfig, LogMel, Waveform
from .datamix import N_CLASSES
from .training import minibatches, run_sgd, set_deterministic
from .validation import check_is_fitted, check_labels, check_waveforms


class ResidualBlock(nn.Module):
    def __init__(self, channels, dilation):
        super().__init__()
        pad = (dilation, 1)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=pad, dilation=(dilation, 1))
        self.norm1 = nn.GroupNorm(1, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=pad, dilation=(dilation, 1))
        self.norm2 = nn.GroupNorm(1, channels)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        return F.relu(x + self.norm2(self.conv2(y)))


class ResNetKWS(nn.Module):
    """Waveform batch (batch, time) -> class logits (batch, 12).

    Strided conv stem, residual blocks with growing time dilation, average
    pooling over time only (pitch position carries class information) and a
    linear head over (channels x mel bins). The head starts near zero so an
    untrained model is close to uniform.
    """

    def __init__(self, fc: FeatureConfig | None = None, channels: int = 16, n_blocks: int = 3,
                 n_classes: int = N_CLASSES):
        super().__init__()
        self.features = LogMel(fc)
        self.stem = nn.Conv2d(1, channels, 3, stride=2, padding=1)
        self.stem_norm = nn.GroupNorm(1, channels)
        self.blocks = nn.ModuleList(ResidualBlock(channels, 2**i) for i in range(n_blocks))
        self.head = nn.Linear(channels * ((self.features.fc.n_mels + 1) // 2), n_classes)
        nn.init.normal_(self.head.weight, std=0.01)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        f = self.features(x)
        # per-utterance standardization makes the net invariant to overall gain
        f = (f - f.mean(dim=(1, 2), keepdim=True)) / (f.std(dim=(1, 2), keepdim=True) + 1e-5)
        h = F.relu(self.stem_norm(self.stem(f[:, None])))
        for block in self.blocks:
            h = block(h)
        return self.head(h.mean(dim=2).flatten(1))


def classify(x, model: ResNetKWS) -> np.ndarray:
    """Probability vector over the 12 classes for one waveform."""
    return predict_proba(model, x)[0]


def predict_proba(model: ResNetKWS, X) -> np.ndarray:
    X = check_waveforms(X, min_len=model.features.fc.window_len)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        logits = model(torch.as_tensor(X, dtype=dtype)).double()
    return torch.softmax(logits, dim=-1).numpy()


def accuracy(predict, X, y) -> float:
    """Fraction of items whose argmax class equals the label; ties go to the lowest index.

    ``predict`` is a fitted KeywordSpotter, a ResNetKWS or any callable
    returning (n, n_classes) scores.
    """
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    if isinstance(predict, KeywordSpotter):
        scores = predict.predict_proba(X)
    elif isinstance(predict, ResNetKWS):
        scores = predict_proba(predict, X)
    else:
        scores = np.asarray(predict(X))
    return float(np.mean(np.argmax(scores, axis=1) == y))


class KeywordSpotter(ClassifierMixin, BaseEstimator):
    """12-way keyword classifier with an sklearn interface.

    ``fit(X, y)`` trains on the given waveforms. With ``noise_pool`` the
    training audio is re-augmented every epoch under ``policy``.
    """

    def __init__(self, n_mels=40, window_len=400, hop=160, log_floor=1e-6, channels=16,
                 n_blocks=3, epochs=10, peak_lr=0.02, warmup_epochs=2, momentum=0.9,
                 weight_decay=1e-3, batch_size=16, dtype="float32", random_state=0):
        self.n_mels = n_mels
        self.window_len = window_len
        self.hop = hop
        self.log_floor = log_floor
        self.channels = channels
        self.n_blocks = n_blocks
        self.epochs = epochs
        self.peak_lr = peak_lr
        self.warmup_epochs = warmup_epochs
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.dtype = dtype
        self.random_state = random_state

    @property
    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(self.n_mels, self.window_len, self.hop, self.log_floor)

    def initialize(self):
        torch.manual_seed(self.random_state)
        self.module_ = ResNetKWS(self.feature_config, self.channels, self.n_blocks)
        self.module_.to(getattr(torch, self.dtype)).eval()
        self.classes_ = np.arange(N_CLASSES)
        self.history_ = []
        return self

    def fit(self, X, y, *, noise_pool=None, policy=None, eval_set=None, warm_start=False,
            log=None):
        X = check_waveforms(X, min_len=self.window_len)
        y = check_labels(y, len(X), N_CLASSES)
        set_deterministic(self.random_state)
        if not (warm_start and hasattr(self, "module_")):
            self.initialize()
        dtype = getattr(torch, self.dtype)
        policy = policy or datamix.AugmentPolicy(seed=self.random_state)
        labels = torch.as_tensor(y)

        def epoch_batches(epoch):
            rng = datamix.worker_rng(self.random_state, 0, epoch)
            audio = X if noise_pool is None else augment_epoch(X, noise_pool, policy, epoch)
            for idx in minibatches(len(X), self.batch_size, rng):
                yield torch.as_tensor(audio[idx], dtype=dtype), labels[idx]

        def loss_fn(batch):
            audio, target = batch
            return F.cross_entropy(self.module_(audio), target)

        validate = None
        if eval_set is not None:
            Xv, yv = eval_set
            validate = lambda: self.score(Xv, yv)
        result = run_sgd(self.module_, epoch_batches, loss_fn, epochs=self.epochs,
                         peak_lr=self.peak_lr, warmup_epochs=self.warmup_epochs,
                         momentum=self.momentum, weight_decay=self.weight_decay,
                         validate=validate, log=log)
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    def predict_proba(self, X):
        check_is_fitted(self)
        return predict_proba(self.module_, X)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def score(self, X, y, sample_weight=None):
        return accuracy(self, X, y)

    def freeze(self, frozen: bool = True):
        check_is_fitted(self)
        for p in self.module_.parameters():
            p.requires_grad_(not frozen)
        return self


def augment_epoch(X, noise_pool, policy, epoch) -> np.ndarray:
    """On-the-fly augmentation of every row of ``X`` for one epoch."""
    rng = datamix.worker_rng(policy.seed, 1, epoch)
    return np.stack([datamix.augment(Waveform(row), noise_pool, policy, rng).samples
                     for row in X])
