import math

import numpy as np
import pytest
import torch

from sekws.exceptions import NonFiniteLossError, ShapeError
from sekws.training import lr_schedule, minibatches, run_sgd, sgd_step


def test_schedule_examples():
    assert lr_schedule(0, 100, 10, 0.1) == 0.0
    assert lr_schedule(5, 100, 10, 0.1) == pytest.approx(0.05)
    assert lr_schedule(10, 100, 10, 0.1) == pytest.approx(0.1)
    # halfway through the cosine phase
    assert lr_schedule(55, 100, 10, 0.1) == pytest.approx(0.05)
    assert abs(lr_schedule(100, 100, 10, 0.1)) < 1e-12
    assert lr_schedule(0, 10, 0, 0.1) == pytest.approx(0.1)


def test_schedule_preconditions():
    with pytest.raises(ValueError):
        lr_schedule(11, 10, 2, 0.1)
    with pytest.raises(ValueError):
        lr_schedule(0, 10, 10, 0.1)


def test_sgd_direct_arithmetic():
    p = {"w": torch.tensor([1.0], dtype=torch.float64)}
    sgd_step(p, {"w": torch.tensor([0.5], dtype=torch.float64)}, lr=0.1, momentum=0.0,
             weight_decay=0.0)
    assert p["w"].item() == pytest.approx(0.95, abs=1e-15)


def test_sgd_momentum_and_decay_by_hand():
    p = {"w": torch.tensor([1.0], dtype=torch.float64)}
    g = {"w": torch.tensor([0.5], dtype=torch.float64)}
    state = sgd_step(p, g, lr=0.1, momentum=0.9, weight_decay=0.1)
    # v1 = 0.5 + 0.1 * 1.0 = 0.6 ; p1 = 1 - 0.06 = 0.94
    assert p["w"].item() == pytest.approx(0.94, abs=1e-15)
    sgd_step(p, g, lr=0.1, momentum=0.9, weight_decay=0.1, state=state)
    # v2 = 0.9 * 0.6 + 0.5 + 0.1 * 0.94 = 1.134 ; p2 = 0.94 - 0.1134 = 0.8266
    assert p["w"].item() == pytest.approx(0.8266, abs=1e-12)


def test_sgd_zero_lr_frozen_and_missing_grad():
    p = {"a": torch.ones(3), "b": torch.ones(3), "c": torch.ones(3)}
    g = {"a": torch.ones(3), "b": torch.ones(3), "c": None}
    sgd_step(p, g, lr=0.0)
    assert torch.equal(p["a"], torch.ones(3))
    sgd_step(p, g, lr=1.0, frozen={"b"})
    assert torch.equal(p["b"], torch.ones(3)) and torch.equal(p["c"], torch.ones(3))
    assert not torch.equal(p["a"], torch.ones(3))


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step({"a": torch.ones(3)}, {"a": torch.ones(2)}, lr=0.1)


def test_minibatches_partition(rng):
    batches = minibatches(10, 4, rng)
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def _quadratic():
    torch.manual_seed(0)
    module = torch.nn.Linear(1, 1, bias=False).double()
    with torch.no_grad():
        module.weight.fill_(3.0)
    return module


def test_run_sgd_converges_and_logs():
    module = _quadratic()
    x = torch.ones(1, 1, dtype=torch.float64)
    rows = []
    result = run_sgd(module, lambda e: [x] * 5, lambda b: (module(b) ** 2).sum(), epochs=10,
                     peak_lr=0.1, warmup_epochs=1, momentum=0.0, weight_decay=0.0, log=rows.append)
    assert abs(module.weight.item()) < 0.5
    assert [r["epoch"] for r in rows] == list(range(11))
    assert len(result.history) == 11
    assert math.isnan(result.history[0]["train_loss"])


def test_run_sgd_keeps_best_validation_state():
    module = _quadratic()
    x = torch.ones(1, 1, dtype=torch.float64)
    # validation rewards a large weight, training shrinks it: epoch 0 must win
    result = run_sgd(module, lambda e: [x], lambda b: (module(b) ** 2).sum(), epochs=3,
                     peak_lr=0.1, warmup_epochs=0, momentum=0.0, weight_decay=0.0,
                     validate=lambda: module.weight.item())
    assert result.best_epoch == 0
    assert module.weight.item() == 3.0


def test_run_sgd_rejects_non_finite_loss():
    module = _quadratic()
    x = torch.ones(1, 1, dtype=torch.float64)
    with pytest.raises(NonFiniteLossError, match="epoch 1"):
        run_sgd(module, lambda e: [x], lambda b: module(b).sum() * float("inf"), epochs=2,
                peak_lr=0.1, warmup_epochs=0, momentum=0.9, weight_decay=0.0)
