"""Optimizer, learning-rate schedule and the shared minibatch SGD loop."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .exceptions import NonFiniteLossError, ShapeError


def set_deterministic(seed: int, threads: int = 1) -> None:
    """Seed torch and pin it to deterministic single-threaded kernels."""
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear ramp from 0 to ``peak_lr`` over ``warmup_steps``, then cosine decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if not 0 <= warmup_steps < total_steps:
        raise ValueError("need 0 <= warmup_steps < total_steps")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor | None],
             lr: float, momentum: float = 0.9, weight_decay: float = 1e-3,
             state: dict | None = None, frozen: Iterable[str] = ()) -> dict:
    """One in-place SGD update with momentum and L2 weight decay.

    ``v <- momentum * v + (grad + weight_decay * param)`` then
    ``param <- param - lr * v``. Tensors named in ``frozen`` and tensors
    without a gradient are left untouched. Returns the momentum state.
    """
    state = {} if state is None else state
    frozen = set(frozen)
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if name in frozen or g is None:
                continue
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, "
                                 f"parameter has {tuple(p.shape)}")
            d = g + weight_decay * p if weight_decay else g.clone()
            v = state.get(name)
            v = d if v is None else momentum * v + d
            state[name] = v
            p.sub_(lr * v)
    return state


@dataclass
class FitResult:
    history: list
    best_metric: float
    best_epoch: int


def run_sgd(module: torch.nn.Module, epoch_batches: Callable[[int], Iterable],
            loss_fn: Callable, *, epochs: int, peak_lr: float, warmup_epochs: int,
            momentum: float, weight_decay: float,
            validate: Callable[[], float] | None = None, higher_is_better: bool = True,
            log: Callable[[dict], None] | None = None) -> FitResult:
    """Train ``module`` in place and restore its best-validation state.

    ``epoch_batches(epoch)`` yields the batches for one epoch and
    ``loss_fn(batch)`` returns a scalar tensor. Parameters with
    ``requires_grad=False`` are frozen. The untrained state is scored too,
    so the kept state is never worse than the starting point on validation.
    """
    named = dict(module.named_parameters())
    frozen = {n for n, p in named.items() if not p.requires_grad}
    trainable = [p for p in named.values() if p.requires_grad]

    batches_by_epoch = None
    steps_per_epoch = None
    history = []
    best_metric = validate() if validate is not None else -math.inf
    best_epoch = 0
    best_state = copy.deepcopy(module.state_dict())
    history.append({"epoch": 0, "lr": 0.0, "train_loss": float("nan"), "val_metric": best_metric})
    if log:
        log(history[-1])

    state: dict = {}
    step = 0
    for epoch in range(1, epochs + 1):
        batches = list(epoch_batches(epoch))
        if steps_per_epoch is None:
            steps_per_epoch = max(1, len(batches))
            total = steps_per_epoch * epochs
            warmup = min(steps_per_epoch * warmup_epochs, total - 1)
        module.train()
        losses = []
        lr = 0.0
        for batch in batches:
            lr = lr_schedule(min(step + 1, total), total, warmup, peak_lr)
            for p in trainable:
                p.grad = None
            loss = loss_fn(batch)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, step {step}, lr {lr:.3g}")
            if trainable:
                loss.backward()
            grads = {n: p.grad for n, p in named.items()}
            sgd_step(named, grads, lr, momentum, weight_decay, state, frozen)
            losses.append(float(loss.detach()))
            step += 1
        module.eval()
        metric = validate() if validate is not None else -float(np.mean(losses))
        improved = metric > best_metric if higher_is_better else metric < best_metric
        if improved:
            best_metric, best_epoch = metric, epoch
            best_state = copy.deepcopy(module.state_dict())
        history.append({"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
                        "val_metric": metric})
        if log:
            log(history[-1])
    module.load_state_dict(best_state)
    module.eval()
    return FitResult(history, best_metric, best_epoch)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
