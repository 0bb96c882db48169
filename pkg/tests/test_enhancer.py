import numpy as np
import pytest
import torch
from sklearn.base import clone

from sekws import datamix
from sekws.audio import Waveform
from sekws.enhancer import (ConvTasNet, ConvTasNetEnhancer, EnhancerConfig, IdentityEnhancer,
                            encode, enhance, receptive_field, separate)
from sekws.exceptions import ShapeError


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return ConvTasNet().double().eval()


def test_encoder_frames(model, rng):
    # floor((16000 - 320) / 160) + 1 frames; 16000 needs no padding with this stride
    assert encode(rng.standard_normal(16000), model).shape == (99, 64)
    assert encode(rng.standard_normal(16050), model).shape == (100, 64)


def test_zero_input(model):
    assert np.all(encode(np.zeros(1600), model) == 0)
    assert np.all(enhance(np.zeros(1600), model) == 0)


def test_short_input_rejected(model):
    with pytest.raises(ShapeError):
        encode(np.zeros(319), model)


def test_mask_is_bounded(model, rng):
    mask = separate(np.abs(rng.standard_normal((50, 64))) * 10, model)
    assert mask.shape == (50, 64)
    assert mask.min() >= 0 and mask.max() <= 1


def test_causal_mask_ignores_later_frames(rng):
    torch.manual_seed(1)
    causal = ConvTasNet(EnhancerConfig(causal=True)).double().eval()
    rep = np.abs(rng.standard_normal((40, 64)))
    t = 20
    rep2 = rep.copy()
    rep2[t + 1] += 5.0
    np.testing.assert_array_equal(separate(rep, causal)[:t + 1], separate(rep2, causal)[:t + 1])


def test_noncausal_mask_sees_later_frames(rng):
    torch.manual_seed(1)
    model = ConvTasNet(EnhancerConfig(causal=False)).double().eval()
    rep = np.abs(rng.standard_normal((40, 64)))
    rep2 = rep.copy()
    rep2[21] += 5.0
    assert not np.array_equal(separate(rep, model)[20], separate(rep2, model)[20])


def test_output_length_and_waveform_passthrough(model, rng):
    w = Waveform(rng.standard_normal(16000) * 0.1)
    out = enhance(w, model)
    assert isinstance(out, Waveform) and len(out) == 16000


def test_receptive_field():
    # 320 + 160 * 1 * (3 - 1) * 1
    assert receptive_field(EnhancerConfig(n_blocks_per_repeat=1, n_repeats=1)) == 640
    assert receptive_field(EnhancerConfig(n_blocks_per_repeat=0)) == 320
    assert (receptive_field(EnhancerConfig(n_repeats=4))
            > receptive_field(EnhancerConfig(n_repeats=2)))


def test_config_validation():
    with pytest.raises(ValueError):
        EnhancerConfig(kernel_len=300, stride=160)
    with pytest.raises(ValueError):
        EnhancerConfig(conv_kernel=4)


def test_estimator_api(rng):
    est = ConvTasNetEnhancer(encoder_channels=16, bottleneck_channels=8, conv_channels=16)
    assert clone(est).get_params()["encoder_channels"] == 16
    with pytest.raises(Exception):
        est.transform(np.zeros((1, 1600)))
    est.initialize()
    assert est.transform(rng.standard_normal((2, 1600))).shape == (2, 1600)


def test_fit_improves_on_start_and_is_deterministic():
    utts = datamix.generate_synthetic_corpus(2, 20, seed=0)
    X, _ = datamix.stack(datamix.split_of(utts, "train"))
    pool = datamix.generate_noise_pool(2, seed=1, duration_s=3.0)
    val = datamix.freeze_noisy_set(datamix.split_of(utts, "validation"), pool, seed=2)
    Xv = np.stack([m.mixture.samples for m in val])
    Sv = np.stack([m.clean.samples for m in val])
    kw = dict(encoder_channels=16, bottleneck_channels=8, conv_channels=16, epochs=3,
              warmup_epochs=1, batch_size=8)
    a = ConvTasNetEnhancer(**kw).fit(X, noise_pool=pool, eval_set=(Xv, Sv))
    b = ConvTasNetEnhancer(**kw).fit(X, noise_pool=pool, eval_set=(Xv, Sv))
    assert [h["train_loss"] for h in a.history_[1:]] == [h["train_loss"] for h in b.history_[1:]]
    assert a.score(Xv, Sv) >= a.history_[0]["val_metric"]


def test_identity_enhancer_copies(rng):
    X = rng.standard_normal((2, 100))
    out = IdentityEnhancer().fit().transform(X)
    np.testing.assert_array_equal(out, X)
    assert out is not X
