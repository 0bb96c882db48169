"""Waveform container, 16-bit WAV I/O and the log-mel frontend."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile
from torch import nn

from .exceptions import ShapeError

SAMPLE_RATE = 16000


@dataclass(frozen=True, eq=False)
class Waveform:
    """A mono sample sequence with its sample rate.

    Samples are stored as float64 and nominally lie in [-1, 1].
    """

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ShapeError(f"waveform must be 1-D, got shape {samples.shape}")
        if samples.size == 0:
            raise ShapeError("waveform is empty")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def power(self) -> float:
        """Mean squared amplitude over the whole signal."""
        return float(np.mean(self.samples**2))

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate_hz)


def as_array(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def fix_length(samples: np.ndarray, n: int) -> np.ndarray:
    """Trailing zero-pad or keep the head so the result has ``n`` samples."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[-1] >= n:
        return samples[..., :n].copy()
    pad = [(0, 0)] * (samples.ndim - 1) + [(0, n - samples.shape[-1])]
    return np.pad(samples, pad)


def read_wav(path, channel: int = 0) -> Waveform:
    """Read a PCM WAV file, keeping only ``channel`` for multichannel sources."""
    rate, data = wavfile.read(str(path))
    if data.ndim == 2:
        data = data[:, channel]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    return Waveform(samples, rate)


def write_wav(path, wav, sample_rate_hz: int | None = None) -> Path:
    """Write 16-bit PCM. ``wav`` is a Waveform, a 1-D array or a (time, channels) array."""
    if isinstance(wav, Waveform):
        rate, samples = wav.sample_rate_hz, wav.samples
    else:
        rate, samples = sample_rate_hz or SAMPLE_RATE, np.asarray(wav, dtype=np.float64)
    pcm = np.round(np.clip(samples, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), rate, pcm)
    return path


@dataclass(frozen=True)
class FeatureConfig:
    n_mels: int = 40
    window_len: int = 400
    hop: int = 160
    log_floor: float = 1e-6
    n_fft: int | None = None
    sample_rate_hz: int = SAMPLE_RATE
    f_min: float = 20.0
    f_max: float | None = None

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not 0 < self.hop <= self.window_len:
            raise ValueError("need 0 < hop <= window_len")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.n_fft is not None and self.n_fft < self.window_len:
            raise ValueError("n_fft must be >= window_len")

    @property
    def fft_size(self) -> int:
        if self.n_fft is not None:
            return self.n_fft
        return 1 << (self.window_len - 1).bit_length()

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.window_len) // self.hop + 1


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(fc: FeatureConfig) -> np.ndarray:
    """Triangular HTK-scale filters, shape (n_fft // 2 + 1, n_mels)."""
    n_freq = fc.fft_size // 2 + 1
    f_max = fc.f_max or fc.sample_rate_hz / 2
    bin_hz = np.linspace(0.0, fc.sample_rate_hz / 2, n_freq)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fc.f_min), _hz_to_mel(f_max), fc.n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_hz[None, :] - lo) / (mid - lo)
    down = (hi - bin_hz[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    return fb.T


class LogMel(nn.Module):
    """Differentiable log-mel power features, (batch, time) -> (batch, frames, n_mels).

    Frames are taken without centering, so a 16000-sample input with a
    400/160 window/hop gives 98 frames.
    """

    def __init__(self, fc: FeatureConfig | None = None):
        super().__init__()
        self.fc = fc or FeatureConfig()
        self.register_buffer("window", torch.hann_window(self.fc.window_len, periodic=True,
                                                         dtype=torch.float64))
        self.register_buffer("fb", torch.from_numpy(mel_filterbank(self.fc)))

    def forward(self, x):
        if x.shape[-1] < self.fc.window_len:
            raise ShapeError(f"input has {x.shape[-1]} samples, "
                             f"fewer than window_len={self.fc.window_len}")
        frames = x.unfold(-1, self.fc.window_len, self.fc.hop) * self.window.to(x.dtype)
        spec = torch.fft.rfft(frames, n=self.fc.fft_size)
        power = spec.real**2 + spec.imag**2
        return torch.log(power @ self.fb.to(x.dtype) + self.fc.log_floor)


def logmel(x, fc: FeatureConfig | None = None) -> np.ndarray:
    """Log-mel feature map (frames, n_mels) of a single waveform."""
    module = LogMel(fc)
    with torch.no_grad():
        out = module(torch.tensor(as_array(x), dtype=torch.float64)[None])
    return out[0].numpy()
