"""Signal metrics and training losses.

Plain SDR is ``10 log10(|s|^2 / |s - s_hat|^2)``. The scale-invariant
variant is available through ``variant="si"`` for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .audio import as_array
from .exceptions import DegenerateInputError, DomainError, ShapeError

SDR_CAP_DB = 60.0
CE_EPS = 1e-12
SDR_VARIANTS = ("plain", "si")


@dataclass(frozen=True)
class LossValue:
    value: float
    components: dict = field(default_factory=dict)


def _pair(reference, estimate):
    s, e = as_array(reference), as_array(estimate)
    if s.shape != e.shape:
        raise ShapeError(f"reference shape {s.shape} != estimate shape {e.shape}")
    return s, e


def sdr_db(reference, estimate, variant: str = "plain") -> float:
    """Signal-to-distortion ratio in dB; ``math.inf`` when the estimate is exact."""
    s, e = _pair(reference, estimate)
    ref_pow = float(np.dot(s, s))
    if ref_pow == 0.0:
        raise DegenerateInputError("reference has zero power")
    if variant == "si":
        s = (np.dot(e, s) / ref_pow) * s
        ref_pow = float(np.dot(s, s))
    elif variant != "plain":
        raise ValueError(f"unknown sdr variant {variant!r}")
    err = s - e
    err_pow = float(np.dot(err, err))
    if err_pow == 0.0:
        return math.inf
    if ref_pow == 0.0:
        return -math.inf
    return 10.0 * math.log10(ref_pow / err_pow)


def sdr_improvement(reference, mixture, enhanced, variant: str = "plain") -> float:
    """SDR of ``enhanced`` minus SDR of the unprocessed ``mixture``."""
    return sdr_db(reference, enhanced, variant) - sdr_db(reference, mixture, variant)


def cross_entropy(probs, label: int, eps: float = CE_EPS) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= int(label) < probs.shape[-1] or int(label) != label:
        raise DomainError(f"label {label} outside [0, {probs.shape[-1]})")
    return -math.log(max(float(probs[int(label)]), eps))


def combined_loss(ce: float, sdr: float, beta: float, cap: float = SDR_CAP_DB) -> LossValue:
    """``ce + beta * (-sdr)`` with the SDR clamped to ``[-cap, cap]`` first."""
    sdr = min(max(float(sdr), -cap), cap)
    ce = float(ce)
    if not (math.isfinite(ce) and math.isfinite(beta)):
        raise ValueError("combined_loss needs finite ce and beta")
    sdr_loss = -sdr
    return LossValue(ce + beta * sdr_loss, {"ce": ce, "sdr_loss": sdr_loss})


# --- differentiable batch versions used in training ----------------------------------------

def sdr_db_torch(reference: torch.Tensor, estimate: torch.Tensor, variant: str = "plain",
                 cap: float = SDR_CAP_DB) -> torch.Tensor:
    """Per-item SDR over the last axis, capped to ``[-cap, cap]`` with finite gradients."""
    if reference.shape != estimate.shape:
        raise ShapeError(f"reference shape {tuple(reference.shape)} != "
                         f"estimate shape {tuple(estimate.shape)}")
    if variant == "si":
        scale = (estimate * reference).sum(-1, keepdim=True) / (
            (reference * reference).sum(-1, keepdim=True))
        reference = scale * reference
    elif variant != "plain":
        raise ValueError(f"unknown sdr variant {variant!r}")
    ref_pow = (reference * reference).sum(-1)
    err = reference - estimate
    err_pow = (err * err).sum(-1)
    # error power floored so the ratio never exceeds the cap
    err_pow = torch.maximum(err_pow, ref_pow * 10.0 ** (-cap / 10.0))
    sdr = 10.0 * (torch.log10(ref_pow) - torch.log10(err_pow))
    return torch.clamp(sdr, min=-cap)


def sdr_loss_torch(reference, estimate, variant: str = "plain") -> torch.Tensor:
    """Batch-mean negative SDR."""
    return -sdr_db_torch(reference, estimate, variant).mean()


def joint_loss_torch(logits, labels, reference, estimate, beta: float,
                     variant: str = "plain") -> tuple[torch.Tensor, dict]:
    """Cross-entropy plus ``beta`` times negative SDR; returns (total, components)."""
    ce = torch.nn.functional.cross_entropy(logits, labels)
    if beta == 0.0:
        return ce, {"ce": ce.detach(), "sdr_loss": torch.zeros(())}
    sdr_l = sdr_loss_torch(reference, estimate, variant)
    return ce + beta * sdr_l, {"ce": ce.detach(), "sdr_loss": sdr_l.detach()}
