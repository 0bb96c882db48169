import numpy as np
import pytest
import torch

from sekws.audio import Waveform
from sekws.checkpoint import tensor_digest
from sekws.exceptions import DomainError, ShapeError
from sekws.injection import (AlphaGrid, SoftSwitch, SwitchNet, inject, predict_alpha,
                             sweep_alpha, train_switch, write_sweep_csv)
from sekws.spotter import KeywordSpotter


def test_endpoints_and_equal_inputs(rng):
    x, e = rng.standard_normal(64), rng.standard_normal(64)
    assert np.array_equal(inject(e, x, 0.0), x)
    assert np.array_equal(inject(e, x, 1.0), e)
    np.testing.assert_allclose(inject(x, x, 0.37), x, atol=1e-15)
    assert isinstance(inject(Waveform(e), Waveform(x), 0.5), Waveform)


def test_inject_errors(rng):
    with pytest.raises(ShapeError):
        inject(np.zeros(3), np.zeros(4), 0.5)
    with pytest.raises(DomainError):
        inject(np.zeros(3), np.zeros(3), 1.5)


def test_grid_validation():
    assert len(AlphaGrid()) == 21
    with pytest.raises(ValueError):
        AlphaGrid((0.0, 0.5))
    with pytest.raises(ValueError):
        AlphaGrid((0.5, 0.2), require_endpoints=False)


def test_one_point_grid_predicts_that_point(rng):
    torch.manual_seed(0)
    net = SwitchNet(AlphaGrid((0.5,), require_endpoints=False)).double()
    x = rng.standard_normal(4000)
    assert predict_alpha(x, rng.standard_normal(4000), net) == 0.5


class _Fixed:
    """Spotter stub: class 0 when the first sample is positive."""

    def score(self, X, y):
        return float(np.mean((X[:, 0] > 0).astype(int) == y))


def test_sweep_rows_and_endpoints(rng):
    X = rng.standard_normal((30, 10))
    y = (X[:, 0] > 0).astype(int)
    E = -X
    rows = sweep_alpha(None, _Fixed(), X, y, X_enhanced=E)
    assert len(rows) == 21
    assert rows[0] == (0.0, _Fixed().score(X, y))
    assert rows[-1] == (1.0, _Fixed().score(E, y))
    identity = sweep_alpha(None, _Fixed(), X, y)
    assert len({a for _, a in identity}) == 1


def test_sweep_csv(tmp_path):
    path = write_sweep_csv(tmp_path / "s.csv", [(0.0, 0.5), (1.0, 0.75)], "validation", "cfg")
    write_sweep_csv(path, [(0.0, 0.25)], "test", "cfg", append=True)
    lines = path.read_text().splitlines()
    assert lines[0] == "alpha,split,accuracy,configuration"
    assert len(lines) == 4


@pytest.fixture(scope="module")
def tiny_task():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((16, 4000)) * 0.1
    E = rng.standard_normal((16, 4000)) * 0.1
    y = rng.integers(0, 4, 16)
    kws = KeywordSpotter(channels=4).initialize()
    return X, E, y, kws


def test_training_leaves_spotter_untouched_and_restores_flags(tiny_task):
    X, E, y, kws = tiny_task
    digest = tensor_digest(kws)
    sw = SoftSwitch(epochs=2, warmup_epochs=0, hidden=8, n_layers=1, n_mels=16)
    sw.fit(X, y, spotter=kws, X_enhanced=E)
    assert tensor_digest(kws) == digest
    assert all(p.requires_grad for p in kws.module_.parameters())
    a = sw.predict(X, E)
    assert a.shape == (16,) and a.min() >= 0 and a.max() <= 1


def test_zero_lr_leaves_switch_unchanged(tiny_task):
    X, E, y, kws = tiny_task
    sw = SoftSwitch(hidden=8, n_layers=1, n_mels=16).initialize()
    before = tensor_digest(sw)
    train_switch(sw, None, kws, X, y, epochs=2, lr=0.0, X_enhanced=E)
    assert tensor_digest(sw) == before


def test_transform_mixes_with_predicted_alpha(tiny_task):
    X, E, _, _ = tiny_task
    sw = SoftSwitch(hidden=8, n_layers=1, n_mels=16).initialize()
    a = sw.predict(X, E)
    np.testing.assert_allclose(sw.transform(X, E), a[:, None] * E + (1 - a[:, None]) * X,
                               atol=1e-12)
