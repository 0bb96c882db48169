"""Clean and noisy keyword datasets.

Covers SNR-exact mixing, noise segment sampling, on-the-fly augmentation,
class rebalancing, a procedural keyword corpus with matching ambient
noise, and CSV manifest ingestion of real corpora.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import SAMPLE_RATE, Waveform, fix_length, read_wav, write_wav
from .exceptions import (
    DegenerateInputError,
    InsufficientLengthError,
    InvalidCorpusError,
    ManifestError,
    ShapeError,
    UnknownLabelError,
)

KEYWORDS = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
UNKNOWN = "_unknown_"
SILENCE = "_silence_"
CLASSES = KEYWORDS + (UNKNOWN, SILENCE)
N_CLASSES = len(CLASSES)
SPLITS = ("train", "validation", "test")

# GSC v2 auxiliary words; manifests may use them and they map to UNKNOWN.
AUXILIARY_WORDS = frozenset({
    "backward", "bed", "bird", "cat", "dog", "eight", "five", "follow", "forward",
    "four", "happy", "house", "learn", "marvin", "nine", "one", "seven", "sheila",
    "six", "three", "tree", "two", "visual", "wow", "zero",
})
_LABEL_ALIASES = {"unknown": UNKNOWN, "silence": SILENCE}

UTTERANCE_HEADER = ("utterance_id", "path", "label", "split")
NOISE_HEADER = ("noise_id", "path")


def label_index(label: str) -> int:
    return CLASSES.index(label)


@dataclass(frozen=True, eq=False)
class LabeledUtterance:
    audio: Waveform
    label: str
    split: str
    utterance_id: str

    def __post_init__(self):
        if self.label not in CLASSES:
            raise ValueError(f"label {self.label!r} is not one of the {N_CLASSES} classes")
        if self.split not in SPLITS:
            raise ValueError(f"split {self.split!r} is not one of {SPLITS}")

    @property
    def label_index(self) -> int:
        return label_index(self.label)


@dataclass(frozen=True, eq=False)
class MixtureExample:
    clean: Waveform
    noise_scaled: Waveform
    mixture: Waveform
    snr_db: float
    gain: float

    def measured_snr_db(self) -> float:
        return measure_snr_db(self.clean, self.noise_scaled)


@dataclass(frozen=True)
class AugmentPolicy:
    snr_low_db: float = 0.0
    snr_high_db: float = 15.0
    augment_probability: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.snr_low_db > self.snr_high_db:
            raise ValueError("snr_low_db must not exceed snr_high_db")
        if not 0.0 <= self.augment_probability <= 1.0:
            raise ValueError("augment_probability must lie in [0, 1]")


def worker_rng(seed: int, worker: int = 0, epoch: int = 0) -> np.random.Generator:
    """Independent stream for one (seed, worker, epoch) triple."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(worker), int(epoch)]))


def measure_snr_db(clean, noise) -> float:
    s = clean.samples if isinstance(clean, Waveform) else np.asarray(clean, dtype=np.float64)
    n = noise.samples if isinstance(noise, Waveform) else np.asarray(noise, dtype=np.float64)
    return 10.0 * math.log10(np.mean(s**2) / np.mean(n**2))


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> MixtureExample:
    """Scale ``noise`` so the pair has the requested SNR, then add it to ``clean``."""
    if len(clean) != len(noise):
        raise ShapeError(f"clean has {len(clean)} samples but noise has {len(noise)}")
    p_s, p_n = clean.power(), noise.power()
    if p_s == 0.0:
        raise DegenerateInputError("clean signal has zero power")
    if p_n == 0.0:
        raise DegenerateInputError("noise signal has zero power")
    gain = math.sqrt(p_s / (p_n * 10.0 ** (snr_db / 10.0)))
    noise_scaled = gain * noise.samples
    return MixtureExample(
        clean=clean,
        noise_scaled=clean.with_samples(noise_scaled),
        mixture=clean.with_samples(clean.samples + noise_scaled),
        snr_db=float(snr_db),
        gain=gain,
    )


def sample_noise_segment(noise_file: Waveform, duration_s: float,
                         rng: np.random.Generator) -> Waveform:
    n = int(round(duration_s * noise_file.sample_rate_hz))
    if len(noise_file) < n:
        raise InsufficientLengthError(
            f"noise source has {len(noise_file)} samples, need {n}")
    start = int(rng.integers(0, len(noise_file) - n + 1))
    return noise_file.with_samples(noise_file.samples[start:start + n])


def augment(utt: LabeledUtterance | Waveform, noise_pool: Sequence[Waveform],
            policy: AugmentPolicy, rng: np.random.Generator) -> Waveform:
    """Return a noisy copy of ``utt`` with probability ``policy.augment_probability``.

    Draw order per call is fixed: augment decision, noise file, offset, SNR.
    Un-augmented utterances are returned as the original object.
    """
    if not noise_pool:
        raise ValueError("noise_pool is empty")
    audio = utt.audio if isinstance(utt, LabeledUtterance) else utt
    if rng.random() >= policy.augment_probability:
        return audio
    source = noise_pool[int(rng.integers(len(noise_pool)))]
    segment = sample_noise_segment(source, audio.duration_s, rng)
    snr = rng.uniform(policy.snr_low_db, policy.snr_high_db)
    return mix_at_snr(audio, segment, snr).mixture


def freeze_noisy_set(utterances: Sequence[LabeledUtterance], noise_pool: Sequence[Waveform],
                     seed: int, snr_low_db: float = 0.0,
                     snr_high_db: float = 15.0) -> list[MixtureExample]:
    """Noisy evaluation copies of every utterance, fixed once under ``seed``."""
    rng = worker_rng(seed)
    out = []
    for utt in utterances:
        source = noise_pool[int(rng.integers(len(noise_pool)))]
        segment = sample_noise_segment(source, utt.audio.duration_s, rng)
        snr = rng.uniform(snr_low_db, snr_high_db)
        out.append(mix_at_snr(utt.audio, segment, snr))
    return out


def rebalance_classes(utterances: Sequence[LabeledUtterance],
                      seed: int = 0) -> list[LabeledUtterance]:
    """Resample unknown and silence to the floor of the mean keyword-class count.

    Keyword utterances pass through untouched and in order. Downsampling
    draws without replacement; upsampling keeps every original and draws the
    remainder with replacement.
    """
    counts = {k: 0 for k in KEYWORDS}
    for u in utterances:
        if u.label in counts:
            counts[u.label] += 1
    empty = [k for k, c in counts.items() if c == 0]
    if empty:
        raise InvalidCorpusError(f"keyword classes with no utterances: {empty}")
    target = sum(counts.values()) // len(KEYWORDS)

    rng = np.random.default_rng(seed)
    out = [u for u in utterances if u.label in counts]
    for label in (UNKNOWN, SILENCE):
        pool = [u for u in utterances if u.label == label]
        if not pool or len(pool) == target:
            out.extend(pool)
        elif len(pool) > target:
            keep = np.sort(rng.choice(len(pool), size=target, replace=False))
            out.extend(pool[i] for i in keep)
        else:
            extra = rng.integers(0, len(pool), size=target - len(pool))
            out.extend(pool)
            out.extend(pool[i] for i in extra)
    return out


# --- procedural corpus ---------------------------------------------------------------------

# (start Hz, mid Hz, end Hz, vibrato Hz, n syllables, harmonic amplitudes)
_CLASS_CONTOURS = {
    "yes": (300, 450, 600, 0.0, 1, (1.0, 0.5, 0.25)),
    "no": (600, 450, 300, 0.0, 1, (1.0, 0.5, 0.25)),
    "up": (400, 700, 400, 0.0, 1, (1.0, 0.3, 0.1)),
    "down": (700, 400, 700, 0.0, 1, (1.0, 0.3, 0.1)),
    "left": (350, 350, 350, 8.0, 1, (1.0, 0.6, 0.4)),
    "right": (300, 300, 550, 0.0, 2, (1.0, 0.4, 0.2)),
    "on": (500, 500, 500, 0.0, 2, (1.0, 0.2, 0.05)),
    "off": (800, 650, 500, 0.0, 1, (0.6, 1.0, 0.6)),
    "stop": (250, 450, 450, 0.0, 1, (1.0, 0.8, 0.6)),
    "go": (450, 420, 400, 4.0, 1, (1.0, 0.1, 0.4)),
}


def _tone_contour(n, sr, rng, start, mid, end, vibrato, n_syll, harmonics, pitch, amp, onset,
                  length):
    out = np.zeros(n)
    i0 = int(onset * sr)
    m = min(int(length * sr), n - i0)
    t = np.arange(m) / sr
    u = np.linspace(0.0, 1.0, m)
    # quadratic through (0, start), (0.5, mid), (1, end)
    f = start * (2 * u - 1) * (u - 1) + mid * 4 * u * (1 - u) + end * u * (2 * u - 1)
    f = pitch * (f + 12.0 * np.sin(2 * np.pi * vibrato * t) * (vibrato > 0))
    phase = 2 * np.pi * np.cumsum(f) / sr + rng.uniform(0, 2 * np.pi)
    sig = sum(a * np.sin((h + 1) * phase) for h, a in enumerate(harmonics))
    env = np.sin(np.pi * u) ** 0.6
    if n_syll == 2:
        env = env * (0.15 + 0.85 * np.abs(np.cos(np.pi * u)) ** 0.5 * (np.abs(u - 0.5) > 0.08))
    sig = sig * env
    peak = np.max(np.abs(sig))
    if peak > 0:
        out[i0:i0 + m] = amp * sig / peak
    return out


def pink_noise(n: int, rng: np.random.Generator, exponent: float = 1.0) -> np.ndarray:
    """Unit-RMS noise with a 1/f^exponent power spectrum."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    spec = spec / f ** (exponent / 2)
    spec[0] = 0.0
    x = np.fft.irfft(spec, n)
    return x / np.sqrt(np.mean(x**2))


def synthesize_utterance(label: str, rng: np.random.Generator, sample_rate_hz: int = SAMPLE_RATE,
                         duration_s: float = 1.0) -> np.ndarray:
    n = int(round(duration_s * sample_rate_hz))
    if label == SILENCE:
        return rng.uniform(0.001, 0.01) * pink_noise(n, rng)
    if label == UNKNOWN:
        start, mid, end = rng.uniform(250, 800, size=3)
        params = (start, mid, end, rng.choice([0.0, 6.0]), int(rng.integers(1, 3)),
                  tuple(rng.uniform(0.1, 1.0, size=3)))
    else:
        params = _CLASS_CONTOURS[label]
    pitch = math.exp(rng.uniform(math.log(0.92), math.log(1.08)))
    amp = rng.uniform(0.2, 0.8)
    length = rng.uniform(0.4, 0.55)
    onset = rng.uniform(0.05, duration_s - length - 0.02)
    return _tone_contour(n, sample_rate_hz, rng, *params, pitch=pitch, amp=amp, onset=onset,
                         length=length)


def generate_synthetic_corpus(n_classes: int, n_per_class: int, seed: int,
                              sample_rate_hz: int = SAMPLE_RATE,
                              duration_s: float = 1.0) -> list[LabeledUtterance]:
    """Procedural stand-in for a keyword corpus.

    Uses the first ``n_classes`` entries of ``CLASSES``. Each keyword is a
    fixed multi-tone pitch contour; every utterance gets its own pitch
    shift, amplitude, length and onset. Splits are assigned 80/10/10 within
    each class.
    """
    if not 2 <= n_classes <= N_CLASSES:
        raise ValueError(f"n_classes must lie in [2, {N_CLASSES}], got {n_classes}")
    rng = np.random.default_rng(seed)
    n_train = int(round(0.8 * n_per_class))
    n_val = int(round(0.1 * n_per_class))
    out = []
    for label in CLASSES[:n_classes]:
        order = rng.permutation(n_per_class)
        for i in range(n_per_class):
            rank = order[i]
            split = "train" if rank < n_train else "validation" if rank < n_train + n_val else "test"
            samples = synthesize_utterance(label, rng, sample_rate_hz, duration_s)
            out.append(LabeledUtterance(Waveform(samples, sample_rate_hz), label, split,
                                        f"{label}_{i:05d}"))
    return out


def generate_noise_file(duration_s: float, rng: np.random.Generator, channels: int = 2,
                        sample_rate_hz: int = SAMPLE_RATE) -> np.ndarray:
    """Ambient noise resembling busy indoor/urban scenes, shape (time, channels).

    A mix of pink noise, distant unintelligible harmonic chatter in the
    speech pitch range, and sparse broadband clatter. Channel 2 is a
    slightly delayed copy with independent sensor noise.
    """
    n = int(round(duration_s * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    base = pink_noise(n, rng, exponent=rng.uniform(0.6, 1.4))
    chatter = np.zeros(n)
    for _ in range(int(rng.integers(3, 7))):
        f0 = rng.uniform(180, 700) * (1 + 0.1 * np.sin(2 * np.pi * rng.uniform(0.5, 3) * t
                                                        + rng.uniform(0, 2 * np.pi)))
        phase = 2 * np.pi * np.cumsum(f0) / sample_rate_hz
        voice = sum(rng.uniform(0.2, 1.0) * np.sin(h * phase) for h in (1, 2, 3))
        gate = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(1.5, 5.0) * t + rng.uniform(0, 6.3))
        chatter += voice * gate**2
    chatter /= np.sqrt(np.mean(chatter**2)) + 1e-12
    clatter = np.zeros(n)
    for _ in range(int(rng.poisson(2.0 * duration_s))):
        i = int(rng.integers(0, n))
        m = min(int(0.05 * sample_rate_hz), n - i)
        clatter[i:i + m] += rng.standard_normal(m) * np.exp(-np.arange(m) / (0.008 * sample_rate_hz))
    mix = (rng.uniform(0.5, 1.0) * base + rng.uniform(0.5, 1.2) * chatter
           + rng.uniform(0.0, 2.0) * clatter)
    mix *= rng.uniform(0.05, 0.2) / np.sqrt(np.mean(mix**2))
    cols = [mix]
    for _ in range(channels - 1):
        cols.append(np.roll(mix, int(rng.integers(1, 16))) + 0.002 * rng.standard_normal(n))
    return np.stack(cols, axis=1)


def generate_noise_pool(n_files: int, seed: int, duration_s: float = 10.0,
                        sample_rate_hz: int = SAMPLE_RATE) -> list[Waveform]:
    rng = np.random.default_rng(seed)
    return [Waveform(generate_noise_file(duration_s, rng, 2, sample_rate_hz)[:, 0], sample_rate_hz)
            for _ in range(n_files)]


# --- manifests --------------------------------------------------------------------------------

def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def normalize_label(raw: str) -> str | None:
    label = raw.strip()
    if label in CLASSES:
        return label
    if label.lower() in _LABEL_ALIASES:
        return _LABEL_ALIASES[label.lower()]
    if label.lower() in AUXILIARY_WORDS:
        return UNKNOWN
    return None


def load_manifest(path, duration_s: float = 1.0,
                  sample_rate_hz: int = SAMPLE_RATE) -> list[LabeledUtterance]:
    """Load ``utterance_id,path,label,split`` rows; relative paths resolve against the manifest.

    Clips are zero-padded or truncated to ``duration_s``. Labels outside the
    12 classes map to unknown only when they are known auxiliary words.
    """
    path = Path(path)
    base = path.parent
    n = int(round(duration_s * sample_rate_hz))
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return out
        missing = set(UTTERANCE_HEADER) - set(reader.fieldnames)
        if missing:
            raise ManifestError(-1, f"header lacks columns {sorted(missing)}")
        for i, row in enumerate(reader):
            label = normalize_label(row["label"])
            if label is None:
                raise UnknownLabelError(i, f"unknown label {row['label']!r}")
            split = row["split"].strip()
            if split not in SPLITS:
                raise ManifestError(i, f"unknown split {split!r}")
            wav_path = _resolve(base, row["path"])
            if not wav_path.is_file():
                raise ManifestError(i, f"missing file {wav_path}")
            try:
                wav = read_wav(wav_path)
            except Exception as exc:
                raise ManifestError(i, f"unreadable file {wav_path}: {exc}") from exc
            if wav.sample_rate_hz != sample_rate_hz:
                raise ManifestError(i, f"sample rate {wav.sample_rate_hz} != {sample_rate_hz}")
            out.append(LabeledUtterance(Waveform(fix_length(wav.samples, n), sample_rate_hz),
                                        label, split, row["utterance_id"]))
    return out


def load_noise_manifest(path, sample_rate_hz: int = SAMPLE_RATE) -> list[Waveform]:
    """Load ``noise_id,path`` rows, keeping the first channel of each file."""
    path = Path(path)
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            wav_path = _resolve(path.parent, row["path"])
            if not wav_path.is_file():
                raise ManifestError(i, f"missing file {wav_path}")
            wav = read_wav(wav_path, channel=0)
            if wav.sample_rate_hz != sample_rate_hz:
                raise ManifestError(i, f"sample rate {wav.sample_rate_hz} != {sample_rate_hz}")
            out.append(wav)
    return out


def write_corpus(utterances: Sequence[LabeledUtterance], root) -> Path:
    """Persist as ``<root>/<split>/<label>/<id>.wav`` and return ``<root>/manifest.csv``."""
    root = Path(root)
    manifest = root / "manifest.csv"
    root.mkdir(parents=True, exist_ok=True)
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(UTTERANCE_HEADER)
        for u in utterances:
            rel = Path(u.split) / u.label / f"{u.utterance_id}.wav"
            write_wav(root / rel, u.audio)
            writer.writerow([u.utterance_id, rel.as_posix(), u.label, u.split])
    return manifest


def write_noise_files(files: Sequence[np.ndarray], root, name: str,
                      sample_rate_hz: int = SAMPLE_RATE) -> Path:
    """Write multichannel noise files under ``<root>/<name>/`` plus ``<root>/<name>.csv``."""
    root = Path(root)
    manifest = root / f"{name}.csv"
    root.mkdir(parents=True, exist_ok=True)
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(NOISE_HEADER)
        for i, data in enumerate(files):
            rel = Path(name) / f"noise_{i:04d}.wav"
            write_wav(root / rel, data, sample_rate_hz)
            writer.writerow([f"{name}_{i:04d}", rel.as_posix()])
    return manifest


def synthesize_corpus_tree(root, n_classes: int, n_per_class: int, seed: int,
                           n_noise_files: int = 6, noise_duration_s: float = 10.0) -> dict:
    """Write a procedural corpus plus per-split noise manifests under ``root``."""
    utts = generate_synthetic_corpus(n_classes, n_per_class, seed)
    paths = {"manifest": write_corpus(utts, root)}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    for split in SPLITS:
        files = [generate_noise_file(noise_duration_s, rng) for _ in range(n_noise_files)]
        paths[f"noise_{split}"] = write_noise_files(files, root, f"noise_{split}")
    return paths


def split_of(utterances: Sequence[LabeledUtterance], split: str) -> list[LabeledUtterance]:
    return [u for u in utterances if u.split == split]


def stack(utterances: Sequence[LabeledUtterance]) -> tuple[np.ndarray, np.ndarray]:
    """(n, time) sample matrix and class-index vector."""
    if not utterances:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    X = np.stack([u.audio.samples for u in utterances])
    y = np.array([u.label_index for u in utterances], dtype=np.int64)
    return X, y
