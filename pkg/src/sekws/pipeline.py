"""Training regimes and evaluation.

Standalone enhancer training, clean- and noise-trained spotters (M1/M2),
joint frontend/backend training with freeze flags and the combined
CE + beta * (-SDR) loss, and the evaluation that fills one results row.

Run directories follow a fixed layout::

    <run>/config.txt        flat ``key = value`` TrainConfig dump
    <run>/checkpoints/      versioned checkpoint archives
    <run>/logs.csv          per-epoch rows (epoch, lr, train_loss, val_metric)
    <run>/report.csv        evaluation rows
"""

from __future__ import annotations

import csv
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import datamix
from .checkpoint import load_checkpoint, save_checkpoint
from .datamix import AugmentPolicy, LabeledUtterance
from .enhancer import ConvTasNetEnhancer, epoch_mixtures
from .exceptions import InvalidSpecError
from .injection import inject
from .objectives import joint_loss_torch, sdr_improvement
from .spotter import KeywordSpotter, accuracy
from .training import minibatches, run_sgd, set_deterministic

ENV_PREFIX = "SEKWS_"
LOSS_MODES = ("sdr_only", "ce_only", "combined")


@dataclass
class TrainConfig:
    epochs: int = 10
    peak_lr: float = 0.1
    warmup_epochs: int = 5
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    beta: float = 0.0
    freeze_frontend: bool = False
    freeze_backend: bool = False
    loss_mode: str = "ce_only"
    sdr_variant: str = "plain"

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"need 0 <= warmup_epochs ({self.warmup_epochs}) "
                             f"< epochs ({self.epochs})")
        for name in ("peak_lr", "momentum", "weight_decay", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")

    def to_flat(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_flat(cls, values: Mapping[str, object], env: Mapping[str, str] | None = None
                  ) -> "TrainConfig":
        """Build from string or typed values; ``SEKWS_<FIELD>`` variables in ``env`` win."""
        env = os.environ if env is None else env
        kwargs = {}
        for f in dataclasses.fields(cls):
            raw = env.get(ENV_PREFIX + f.name.upper(), values.get(f.name))
            if raw is not None:
                kwargs[f.name] = _coerce(raw, f.type)
        return cls(**kwargs)


def _coerce(raw, type_name):
    if not isinstance(raw, str):
        return raw
    if type_name in ("bool", bool):
        if raw.strip().lower() in ("1", "true", "yes", "on"):
            return True
        if raw.strip().lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_name in ("int", int):
        return int(raw)
    if type_name in ("float", float):
        return float(raw)
    return raw.strip()


def write_flat_config(path, values: Mapping[str, object]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in values.items():
            fh.write(f"{k} = {'' if v is None else v!r}\n" if isinstance(v, float)
                     else f"{k} = {'' if v is None else v}\n")
    return path


def read_flat_config(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# Paper-scale schedules; the KWS entry follows the cited backend recipe.
PAPER_PRESETS = {
    "se": TrainConfig(epochs=200, peak_lr=0.1, warmup_epochs=5, batch_size=16),
    "kws": TrainConfig(epochs=200, peak_lr=0.1, warmup_epochs=5, batch_size=100),
    "joint": TrainConfig(epochs=100, peak_lr=1e-4, warmup_epochs=5, batch_size=16),
    "switch": TrainConfig(epochs=20, peak_lr=0.01, warmup_epochs=1, batch_size=16),
}
DESK_PRESETS = {
    "se": TrainConfig(epochs=10, peak_lr=0.1, warmup_epochs=2, batch_size=16),
    "kws": TrainConfig(epochs=10, peak_lr=0.02, warmup_epochs=2, batch_size=16),
    "joint": TrainConfig(epochs=5, peak_lr=1e-3, warmup_epochs=1, batch_size=16),
    "switch": TrainConfig(epochs=10, peak_lr=0.1, warmup_epochs=2, batch_size=16),
}


# --- data -------------------------------------------------------------------------------------

@dataclass(eq=False)
class DataBundle:
    """Utterances plus per-split noise pools, with frozen noisy evaluation sets."""

    utterances: list
    noise: dict
    eval_seed: int = 1234
    snr_low_db: float = 0.0
    snr_high_db: float = 15.0
    augment_probability: float = 0.8

    def __post_init__(self):
        self._noisy_cache = {}

    @classmethod
    def synthetic(cls, n_classes=4, n_per_class=60, seed=0, n_noise_files=6,
                  noise_duration_s=10.0, **kwargs) -> "DataBundle":
        utts = datamix.generate_synthetic_corpus(n_classes, n_per_class, seed)
        noise = {split: datamix.generate_noise_pool(n_noise_files, seed=seed * 10 + i + 1,
                                                    duration_s=noise_duration_s)
                 for i, split in enumerate(datamix.SPLITS)}
        return cls(utts, noise, **kwargs)

    @classmethod
    def from_manifests(cls, manifest, noise_manifests: Mapping[str, str], **kwargs
                       ) -> "DataBundle":
        utts = datamix.load_manifest(manifest)
        noise = {split: datamix.load_noise_manifest(p) for split, p in noise_manifests.items()}
        return cls(utts, noise, **kwargs)

    def split(self, split: str) -> list[LabeledUtterance]:
        return datamix.split_of(self.utterances, split)

    def clean(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        return datamix.stack(self.split(split))

    def noisy(self, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(mixtures, labels, clean references), frozen once per split under eval_seed."""
        if split not in self._noisy_cache:
            utts = self.split(split)
            pool = self.noise.get(split) or self.noise["train"]
            seed = self.eval_seed + datamix.SPLITS.index(split)
            mixes = datamix.freeze_noisy_set(utts, pool, seed, self.snr_low_db,
                                             self.snr_high_db)
            X = np.stack([m.mixture.samples for m in mixes])
            S = np.stack([m.clean.samples for m in mixes])
            y = np.array([u.label_index for u in utts], dtype=np.int64)
            self._noisy_cache[split] = (X, y, S)
        return self._noisy_cache[split]

    def policy(self, seed: int, augment_probability: float | None = None) -> AugmentPolicy:
        p = self.augment_probability if augment_probability is None else augment_probability
        return AugmentPolicy(self.snr_low_db, self.snr_high_db, p, seed)


@dataclass
class ExperimentSpec:
    experiment_id: str
    config: TrainConfig
    data: DataBundle
    run_dir: Path | None = None
    frontend_ckpt: Path | None = None
    backend_ckpt: Path | None = None
    fresh_frontend: bool = False
    fresh_backend: bool = False
    frontend_params: dict = field(default_factory=dict)
    backend_params: dict = field(default_factory=dict)
    extra_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.run_dir is not None:
            self.run_dir = Path(self.run_dir)

    @property
    def checkpoint_dir(self) -> Path:
        return self._run_dir() / "checkpoints"

    def _run_dir(self) -> Path:
        if self.run_dir is None:
            self.run_dir = Path("runs") / self.experiment_id
        self.run_dir.mkdir(parents=True, exist_ok=True)
        return self.run_dir

    def write_config(self, extra: Mapping[str, object] | None = None) -> Path:
        values = {"experiment_id": self.experiment_id, **self.config.to_flat()}
        values["frontend_ckpt"] = self.frontend_ckpt
        values["backend_ckpt"] = self.backend_ckpt
        values.update(self.extra_config)
        values.update(extra or {})
        return write_flat_config(self._run_dir() / "config.txt", values)


class _CsvLog:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(self.path, "w", newline="")
        self.writer = None

    def __call__(self, row: dict):
        if self.writer is None:
            self.writer = csv.DictWriter(self.fh, fieldnames=list(row))
            self.writer.writeheader()
        self.writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        self.fh.flush()

    def close(self):
        self.fh.close()


def _estimator_kwargs(cfg: TrainConfig) -> dict:
    return dict(epochs=cfg.epochs, peak_lr=cfg.peak_lr, warmup_epochs=cfg.warmup_epochs,
                momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                batch_size=cfg.batch_size, random_state=cfg.seed)


# --- standalone training -----------------------------------------------------------------------

def train_se(spec: ExperimentSpec) -> Path:
    """Train the enhancer on fresh noisy mixtures each epoch; keep the best validation SDRi."""
    cfg = spec.config
    data = spec.data
    spec.write_config({"regime": "se"})
    enh = ConvTasNetEnhancer(**{**spec.frontend_params, **_estimator_kwargs(cfg),
                                "sdr_variant": cfg.sdr_variant})
    X, _ = data.clean("train")
    Xv, _, Sv = data.noisy("validation")
    log = _CsvLog(spec._run_dir() / "logs.csv")
    try:
        enh.fit(X, noise_pool=data.noise["train"], policy=data.policy(cfg.seed, 1.0),
                eval_set=(Xv, Sv), log=log)
    finally:
        log.close()
    meta = {"experiment_id": spec.experiment_id, "regime": "se", "best_epoch": enh.best_epoch_,
            "best_val_sdri_db": max(h["val_metric"] for h in enh.history_)}
    return save_checkpoint(spec.checkpoint_dir / "frontend.npz", enh, meta)


def train_kws(spec: ExperimentSpec, condition: str) -> Path:
    """Train a spotter on clean (M1) or on-the-fly noise-augmented (M2) audio."""
    if condition not in ("clean", "noisy"):
        raise ValueError("condition must be 'clean' or 'noisy'")
    cfg = spec.config
    data = spec.data
    model_id = "M1" if condition == "clean" else "M2"
    spec.write_config({"regime": "kws", "condition": condition, "model_id": model_id})
    kws = KeywordSpotter(**{**spec.backend_params, **_estimator_kwargs(cfg)})
    X, y = data.clean("train")
    if condition == "clean":
        eval_set = data.clean("validation")
        noise_pool = None
    else:
        Xv, yv, _ = data.noisy("validation")
        eval_set = (Xv, yv)
        noise_pool = data.noise["train"]
    log = _CsvLog(spec._run_dir() / "logs.csv")
    try:
        kws.fit(X, y, noise_pool=noise_pool, policy=data.policy(cfg.seed), eval_set=eval_set,
                log=log)
    finally:
        log.close()
    meta = {"experiment_id": spec.experiment_id, "regime": "kws", "condition": condition,
            "model_id": model_id, "best_epoch": kws.best_epoch_}
    return save_checkpoint(spec.checkpoint_dir / "backend.npz", kws, meta)


# --- joint training ----------------------------------------------------------------------------

class JointModel(nn.Module):
    """Enhancer followed by spotter, with optional fixed injection weight."""

    def __init__(self, frontend: nn.Module, backend: nn.Module, alpha: float = 1.0):
        super().__init__()
        self.frontend = frontend
        self.backend = backend
        self.alpha = alpha

    def forward(self, x):
        enhanced = self.frontend(x)
        mixed = enhanced if self.alpha == 1.0 else self.alpha * enhanced + (1 - self.alpha) * x
        return self.backend(mixed), enhanced


def _load_or_fresh(path, fresh, cls, params, seed):
    if path is not None:
        return load_checkpoint(path)
    if fresh:
        return cls(**{**params, "random_state": seed}).initialize()
    return None


def joint_loss(model: JointModel, noisy, clean, labels, cfg: TrainConfig):
    logits, enhanced = model(noisy)
    if cfg.loss_mode == "ce_only":
        return F.cross_entropy(logits, labels)
    if cfg.loss_mode == "combined":
        total, _ = joint_loss_torch(logits, labels, clean, enhanced, cfg.beta, cfg.sdr_variant)
        return total
    raise InvalidSpecError(f"joint training does not support loss_mode={cfg.loss_mode!r}")


def batch_gradient_norms(model: JointModel, noisy, clean, labels, cfg: TrainConfig) -> dict:
    """Per-tensor gradient norms of the joint loss on one batch (trainable tensors only)."""
    for p in model.parameters():
        p.grad = None
    joint_loss(model, noisy, clean, labels, cfg).backward()
    norms = {n: float(p.grad.norm()) for n, p in model.named_parameters() if p.grad is not None}
    for p in model.parameters():
        p.grad = None
    return norms


def train_joint(spec: ExperimentSpec) -> tuple[Path, Path]:
    """Fine-tune frontend and/or backend through the chained model.

    Frozen sides keep ``requires_grad=False`` for the whole run and are
    saved unchanged. The kept state is the one with the best noisy
    validation accuracy, the untrained starting point included.
    """
    cfg = spec.config
    if cfg.freeze_frontend and cfg.freeze_backend:
        raise InvalidSpecError("joint training needs at least one unfrozen model")
    if cfg.loss_mode not in ("ce_only", "combined"):
        raise InvalidSpecError("joint training uses loss_mode 'ce_only' or 'combined'")
    set_deterministic(cfg.seed)
    enh = _load_or_fresh(spec.frontend_ckpt, spec.fresh_frontend, ConvTasNetEnhancer,
                         spec.frontend_params, cfg.seed)
    kws = _load_or_fresh(spec.backend_ckpt, spec.fresh_backend, KeywordSpotter,
                         spec.backend_params, cfg.seed)
    if enh is None or kws is None:
        raise InvalidSpecError("joint training needs both checkpoints or fresh-init flags")
    spec.write_config({"regime": "joint"})
    enh.freeze(cfg.freeze_frontend)
    kws.freeze(cfg.freeze_backend)
    model = JointModel(enh.module_, kws.module_)
    dtype = next(model.parameters()).dtype
    kws.module_.to(dtype)

    data = spec.data
    X, y = data.clean("train")
    labels = torch.as_tensor(y)
    policy = data.policy(cfg.seed)
    Xv, yv, _ = data.noisy("validation")

    def epoch_batches(epoch):
        noisy, clean = epoch_mixtures(X, data.noise["train"], policy, epoch)
        rng = datamix.worker_rng(cfg.seed, 0, epoch)
        for idx in minibatches(len(X), cfg.batch_size, rng):
            yield (torch.as_tensor(noisy[idx], dtype=dtype),
                   torch.as_tensor(clean[idx], dtype=dtype), labels[idx])

    def loss_fn(batch):
        return joint_loss(model, *batch, cfg)

    def validate():
        return kws.score(enh.transform(Xv), yv)

    log = _CsvLog(spec._run_dir() / "logs.csv")
    try:
        result = run_sgd(model, epoch_batches, loss_fn, epochs=cfg.epochs, peak_lr=cfg.peak_lr,
                         warmup_epochs=cfg.warmup_epochs, momentum=cfg.momentum,
                         weight_decay=cfg.weight_decay, validate=validate, log=log)
    finally:
        log.close()
    meta = {"experiment_id": spec.experiment_id, "regime": "joint", "loss_mode": cfg.loss_mode,
            "beta": cfg.beta, "best_epoch": result.best_epoch,
            "freeze_frontend": cfg.freeze_frontend, "freeze_backend": cfg.freeze_backend}
    front = save_checkpoint(spec.checkpoint_dir / "frontend.npz", enh, meta)
    back = save_checkpoint(spec.checkpoint_dir / "backend.npz", kws,
                           {**meta, **getattr(kws, "checkpoint_metadata_", {}),
                            "regime": "joint"})
    return front, back


# --- evaluation --------------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    experiment_id: str
    sdri_db: float | None
    acc_clean: float
    acc_noisy: float

    def __post_init__(self):
        for name in ("acc_clean", "acc_noisy"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def acc_avg(self) -> float:
        return (self.acc_clean + self.acc_noisy) / 2.0

    def as_row(self) -> dict:
        return {"experiment_id": self.experiment_id,
                "sdri_db": "" if self.sdri_db is None else self.sdri_db,
                "acc_clean": self.acc_clean, "acc_noisy": self.acc_noisy,
                "acc_avg": self.acc_avg}


def _frontend_inputs(frontend, X, alpha, switch):
    if frontend is None:
        return X
    enhanced = frontend.transform(X)
    if switch is not None:
        return switch.transform(X, X_enhanced=enhanced)
    return inject(enhanced, X, 1.0 if alpha is None else alpha)


def evaluate(frontend, backend, data: DataBundle, alpha: float | None = None, switch=None,
             split: str = "test", experiment_id: str = "") -> EvalReport:
    """SDRi on the noisy split plus clean and noisy accuracy, all through the frontend.

    Without a frontend the SDRi is ``None`` (not applicable). Clean audio is
    also passed through the frontend when one is present.
    """
    if backend is None:
        raise ValueError("evaluate needs a backend")
    Xn, y, S = data.noisy(split)
    Xc, yc = data.clean(split)
    if len(y) == 0 or len(yc) == 0:
        raise ValueError(f"split {split!r} has no utterances")
    noisy_in = _frontend_inputs(frontend, Xn, alpha, switch)
    clean_in = _frontend_inputs(frontend, Xc, alpha, switch)
    sdri = None
    if frontend is not None:
        sdri = float(np.mean([sdr_improvement(s, x, e) for s, x, e in zip(S, Xn, noisy_in)]))
    return EvalReport(experiment_id, sdri, accuracy(backend, clean_in, yc),
                      accuracy(backend, noisy_in, y))


def write_accuracy_rows(path, model_id: str, report: EvalReport, split: str = "test") -> Path:
    """Spotter evaluation rows ``model_id,split,condition,accuracy``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_id", "split", "condition", "accuracy"])
        w.writerow([model_id, split, "clean", repr(report.acc_clean)])
        w.writerow([model_id, split, "noisy", repr(report.acc_noisy)])
    return path
