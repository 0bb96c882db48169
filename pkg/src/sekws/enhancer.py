"""Time-domain mask-based speech enhancer.

A learned convolutional encoder turns the waveform into frames of
nonnegative channel activations, a stack of dilated depthwise conv blocks
predicts a sigmoid mask over that representation, and a transposed conv
decoder overlap-adds the masked frames back into a waveform.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from torch import nn

from . import datamix
from .audio import Waveform, as_array
from .exceptions import ShapeError
from .objectives import sdr_improvement, sdr_loss_torch
from .training import minibatches, run_sgd, set_deterministic
from .validation import check_is_fitted, check_waveforms

EPS = 1e-8


@dataclass(frozen=True)
class EnhancerConfig:
    kernel_len: int = 320
    stride: int = 160
    encoder_channels: int = 64
    bottleneck_channels: int = 32
    conv_channels: int = 64
    conv_kernel: int = 3
    n_blocks_per_repeat: int = 2
    n_repeats: int = 2
    causal: bool = True

    def __post_init__(self):
        for name in ("kernel_len", "stride", "encoder_channels", "bottleneck_channels",
                     "conv_channels", "conv_kernel"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_blocks_per_repeat < 0 or self.n_repeats < 0:
            raise ValueError("block and repeat counts must be nonnegative")
        if self.kernel_len % self.stride:
            raise ValueError("stride must divide kernel_len")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")


def receptive_field(config: EnhancerConfig) -> int:
    """Input span in samples that one mask frame depends on.

    Each dilated block widens the frame span by ``(conv_kernel - 1) * dilation``
    with dilations ``1, 2, 4, ...`` restarting every repeat; frames are
    ``stride`` samples apart and each covers ``kernel_len`` samples.
    """
    frames = sum((config.conv_kernel - 1) * 2**i for i in range(config.n_blocks_per_repeat))
    return config.kernel_len + config.stride * config.n_repeats * frames


def receptive_field_ms(config: EnhancerConfig, sample_rate_hz: int = 16000) -> float:
    return 1000.0 * receptive_field(config) / sample_rate_hz


class GlobalLayerNorm(nn.Module):
    """Normalizes over channels and the whole time axis."""

    def __init__(self, channels):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(1, channels, 1))
        self.beta = nn.Parameter(torch.zeros(1, channels, 1))

    def forward(self, x):
        mean = x.mean(dim=(1, 2), keepdim=True)
        var = ((x - mean) ** 2).mean(dim=(1, 2), keepdim=True)
        return self.gamma * (x - mean) / torch.sqrt(var + EPS) + self.beta


class CumulativeLayerNorm(nn.Module):
    """Normalizes frame t with channel statistics accumulated over frames <= t."""

    def __init__(self, channels):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(1, channels, 1))
        self.beta = nn.Parameter(torch.zeros(1, channels, 1))

    def forward(self, x):
        c, t = x.shape[1], x.shape[2]
        count = c * torch.arange(1, t + 1, dtype=x.dtype, device=x.device)
        mean = torch.cumsum(x.sum(1), dim=-1) / count
        power = torch.cumsum((x * x).sum(1), dim=-1) / count
        var = torch.clamp(power - mean**2, min=0.0)
        return (self.gamma * (x - mean[:, None]) / torch.sqrt(var[:, None] + EPS)
                + self.beta)


def _norm(channels, causal):
    return CumulativeLayerNorm(channels) if causal else GlobalLayerNorm(channels)


class DilatedBlock(nn.Module):
    def __init__(self, bottleneck, hidden, kernel, dilation, causal):
        super().__init__()
        self.causal = causal
        self.pad = (kernel - 1) * dilation
        self.expand = nn.Conv1d(bottleneck, hidden, 1)
        self.act1 = nn.PReLU()
        self.norm1 = _norm(hidden, causal)
        self.depthwise = nn.Conv1d(hidden, hidden, kernel, dilation=dilation, groups=hidden)
        self.act2 = nn.PReLU()
        self.norm2 = _norm(hidden, causal)
        self.project = nn.Conv1d(hidden, bottleneck, 1)

    def forward(self, x):
        y = self.norm1(self.act1(self.expand(x)))
        if self.causal:
            y = F.pad(y, (self.pad, 0))
        else:
            y = F.pad(y, (self.pad // 2, self.pad - self.pad // 2))
        y = self.norm2(self.act2(self.depthwise(y)))
        return x + self.project(y)


class Separator(nn.Module):
    def __init__(self, cfg: EnhancerConfig):
        super().__init__()
        n, b = cfg.encoder_channels, cfg.bottleneck_channels
        self.norm = _norm(n, cfg.causal)
        self.bottleneck = nn.Conv1d(n, b, 1)
        self.blocks = nn.ModuleList(
            DilatedBlock(b, cfg.conv_channels, cfg.conv_kernel, 2**i, cfg.causal)
            for _ in range(cfg.n_repeats) for i in range(cfg.n_blocks_per_repeat))
        self.act = nn.PReLU()
        self.mask = nn.Conv1d(b, n, 1)

    def forward(self, w):
        y = self.bottleneck(self.norm(w))
        for block in self.blocks:
            y = block(y)
        return torch.sigmoid(self.mask(self.act(y)))


class ConvTasNet(nn.Module):
    """Single-source masking network, (batch, time) -> (batch, time)."""

    def __init__(self, cfg: EnhancerConfig | None = None):
        super().__init__()
        self.cfg = cfg or EnhancerConfig()
        self.encoder = nn.Conv1d(1, self.cfg.encoder_channels, self.cfg.kernel_len,
                                 stride=self.cfg.stride, bias=False)
        self.separator = Separator(self.cfg)
        self.decoder = nn.ConvTranspose1d(self.cfg.encoder_channels, 1, self.cfg.kernel_len,
                                          stride=self.cfg.stride, bias=False)

    def right_pad(self, n_samples: int) -> int:
        k, s = self.cfg.kernel_len, self.cfg.stride
        if n_samples < k:
            raise ShapeError(f"input has {n_samples} samples, fewer than kernel_len={k}")
        return (s - (n_samples - k) % s) % s

    def encode(self, x):
        """(batch, time) -> (batch, channels, frames), right-padded to whole frames."""
        x = F.pad(x, (0, self.right_pad(x.shape[-1])))
        return F.relu(self.encoder(x[:, None]))

    def decode(self, w, n_samples: int):
        return self.decoder(w)[:, 0, :n_samples]

    def forward(self, x):
        w = self.encode(x)
        return self.decode(w * self.separator(w), x.shape[-1])


def _batch(x, dtype):
    t = torch.tensor(as_array(x), dtype=dtype)
    return t[None] if t.ndim == 1 else t


def encode(x, model: ConvTasNet) -> np.ndarray:
    """Encoder representation of one waveform, shape (frames, channels)."""
    with torch.no_grad():
        w = model.encode(_batch(x, _dtype(model)))
    return w[0].T.numpy()


def separate(representation, model: ConvTasNet) -> np.ndarray:
    """Mask for a (frames, channels) representation, values in [0, 1]."""
    rep = np.asarray(representation, dtype=np.float64)
    if not np.all(np.isfinite(rep)):
        raise ValueError("representation contains non-finite values")
    with torch.no_grad():
        mask = model.separator(torch.as_tensor(rep.T, dtype=_dtype(model))[None])
    return mask[0].T.numpy()


def enhance(x, model: ConvTasNet):
    """Enhanced copy of ``x`` with the same length; Waveform in, Waveform out."""
    with torch.no_grad():
        y = model(_batch(x, _dtype(model)))[0].numpy().astype(np.float64)
    if isinstance(x, Waveform):
        return x.with_samples(y)
    return y


def _dtype(module):
    return next(module.parameters()).dtype


class ConvTasNetEnhancer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` trains with negative-SDR loss, ``transform`` enhances.

    ``fit(X, y)`` takes noisy inputs ``X`` and clean targets ``y`` of shape
    (n_utterances, n_samples). With ``noise_pool`` given instead, ``X`` is
    taken as clean speech and fresh mixtures are drawn every epoch.
    """

    def __init__(self, kernel_len=320, stride=160, encoder_channels=64, bottleneck_channels=32,
                 conv_channels=64, conv_kernel=3, n_blocks_per_repeat=2, n_repeats=2,
                 causal=True, epochs=20, peak_lr=0.1, warmup_epochs=5, momentum=0.9,
                 weight_decay=1e-3, batch_size=16, sdr_variant="plain", dtype="float32",
                 random_state=0):
        self.kernel_len = kernel_len
        self.stride = stride
        self.encoder_channels = encoder_channels
        self.bottleneck_channels = bottleneck_channels
        self.conv_channels = conv_channels
        self.conv_kernel = conv_kernel
        self.n_blocks_per_repeat = n_blocks_per_repeat
        self.n_repeats = n_repeats
        self.causal = causal
        self.epochs = epochs
        self.peak_lr = peak_lr
        self.warmup_epochs = warmup_epochs
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.sdr_variant = sdr_variant
        self.dtype = dtype
        self.random_state = random_state

    @property
    def config(self) -> EnhancerConfig:
        return EnhancerConfig(self.kernel_len, self.stride, self.encoder_channels,
                              self.bottleneck_channels, self.conv_channels, self.conv_kernel,
                              self.n_blocks_per_repeat, self.n_repeats, self.causal)

    def initialize(self):
        """Build fresh parameters without training."""
        torch.manual_seed(self.random_state)
        self.module_ = ConvTasNet(self.config).to(getattr(torch, self.dtype))
        self.module_.eval()
        self.history_ = []
        return self

    def fit(self, X, y=None, *, noise_pool=None, policy=None, eval_set=None, warm_start=False,
            log=None):
        X = check_waveforms(X, min_len=self.kernel_len)
        if y is None and noise_pool is None:
            raise ValueError("fit needs clean targets y or a noise_pool")
        if y is not None:
            y = check_waveforms(y, min_len=self.kernel_len)
            if y.shape != X.shape:
                raise ShapeError(f"targets shape {y.shape} != inputs shape {X.shape}")
        set_deterministic(self.random_state)
        if not (warm_start and hasattr(self, "module_")):
            self.initialize()
        dtype = getattr(torch, self.dtype)
        policy = policy or datamix.AugmentPolicy(augment_probability=1.0,
                                                 seed=self.random_state)

        def epoch_batches(epoch):
            rng = datamix.worker_rng(self.random_state, 0, epoch)
            if noise_pool is not None:
                noisy, clean = epoch_mixtures(X, noise_pool, policy, epoch)
            else:
                noisy, clean = X, y
            for idx in minibatches(len(X), self.batch_size, rng):
                yield (torch.as_tensor(noisy[idx], dtype=dtype),
                       torch.as_tensor(clean[idx], dtype=dtype))

        def loss_fn(batch):
            noisy, clean = batch
            return sdr_loss_torch(clean, self.module_(noisy), self.sdr_variant)

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

    def transform(self, X):
        check_is_fitted(self)
        X = check_waveforms(X, min_len=self.kernel_len)
        with torch.no_grad():
            out = self.module_(torch.as_tensor(X, dtype=_dtype(self.module_)))
        return out.numpy().astype(np.float64)

    def score(self, X, y):
        """Mean SDR improvement (dB) of the enhanced ``X`` over ``X`` against clean ``y``."""
        X = check_waveforms(X, min_len=self.kernel_len)
        y = check_waveforms(y, min_len=self.kernel_len)
        enhanced = self.transform(X)
        return float(np.mean([sdr_improvement(s, x, e, self.sdr_variant)
                              for s, x, e in zip(y, X, enhanced)]))

    def freeze(self, frozen: bool = True):
        check_is_fitted(self)
        for p in self.module_.parameters():
            p.requires_grad_(not frozen)
        return self


def epoch_mixtures(X_clean, noise_pool, policy, epoch):
    """Fresh (noisy, clean) arrays for one epoch, replayable from (policy.seed, epoch)."""
    rng = datamix.worker_rng(policy.seed, 1, epoch)
    noisy = np.empty_like(X_clean)
    for i, row in enumerate(X_clean):
        noisy[i] = datamix.augment(Waveform(row), noise_pool, policy, rng).samples
    return noisy, X_clean


class IdentityEnhancer(TransformerMixin, BaseEstimator):
    """Frontend that returns its input unchanged; the no-op reference for SE."""

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return check_waveforms(X).copy()
