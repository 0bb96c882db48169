import csv
import dataclasses

import numpy as np
import pytest
import torch

from sekws.checkpoint import load_checkpoint, tensor_digest
from sekws.enhancer import IdentityEnhancer
from sekws.exceptions import InvalidSpecError
from sekws.pipeline import (DataBundle, EvalReport, ExperimentSpec, JointModel, TrainConfig,
                            batch_gradient_norms, evaluate, read_flat_config, train_joint,
                            train_kws, train_se, write_flat_config)

TINY = TrainConfig(epochs=2, warmup_epochs=0, peak_lr=0.02, batch_size=8)


@pytest.fixture(scope="module")
def tiny_data():
    return DataBundle.synthetic(2, 10, seed=0, n_noise_files=1, noise_duration_s=3.0)


@pytest.fixture(scope="module")
def tiny_ckpts(tmp_path_factory, tiny_data):
    root = tmp_path_factory.mktemp("tiny")
    se = train_se(ExperimentSpec("se", dataclasses.replace(TINY, peak_lr=0.1), tiny_data,
                                 run_dir=root / "se"))
    kws = train_kws(ExperimentSpec("kws", TINY, tiny_data, run_dir=root / "kws"), "clean")
    return root, se, kws


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=5, warmup_epochs=5)
    with pytest.raises(ValueError):
        TrainConfig(beta=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(loss_mode="other")


def test_config_file_and_env_override(tmp_path):
    cfg = TrainConfig(epochs=7, warmup_epochs=2, beta=0.01, freeze_backend=True)
    path = write_flat_config(tmp_path / "config.txt", cfg.to_flat())
    values = read_flat_config(path)
    assert TrainConfig.from_flat(values, env={}) == cfg
    env = {"SEKWS_EPOCHS": "9", "SEKWS_FREEZE_BACKEND": "false"}
    over = TrainConfig.from_flat(values, env=env)
    assert over.epochs == 9 and over.freeze_backend is False and over.beta == 0.01


def test_malformed_config_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("epochs 3\n")
    with pytest.raises(ValueError, match="bad.txt:1"):
        read_flat_config(path)


def test_eval_report():
    r = EvalReport("x", None, 0.9, 0.7)
    assert abs(r.acc_avg - 0.8) < 1e-12
    assert r.as_row()["sdri_db"] == ""
    with pytest.raises(ValueError):
        EvalReport("x", 0.0, 1.2, 0.5)


def test_frozen_noisy_sets_are_cached(tiny_data):
    a = tiny_data.noisy("test")
    assert tiny_data.noisy("test") is a
    X, y, S = a
    assert X.shape == S.shape and len(y) == len(X)
    assert not np.array_equal(X, S)


def test_run_dir_layout(tiny_ckpts):
    root, se, kws = tiny_ckpts
    for run in ("se", "kws"):
        assert (root / run / "config.txt").exists()
        with open(root / run / "logs.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["epoch"]) for r in rows] == [0, 1, 2]
    assert load_checkpoint(kws).checkpoint_metadata_["model_id"] == "M1"
    assert read_flat_config(root / "kws" / "config.txt")["condition"] == "clean"


def test_train_se_is_deterministic(tmp_path, tiny_data, tiny_ckpts):
    _, se, _ = tiny_ckpts
    again = train_se(ExperimentSpec("se", dataclasses.replace(TINY, peak_lr=0.1), tiny_data,
                                    run_dir=tmp_path / "se"))
    assert tensor_digest(load_checkpoint(again)) == tensor_digest(load_checkpoint(se))


def test_best_checkpoint_never_worse_than_start(tiny_ckpts):
    enh = load_checkpoint(tiny_ckpts[1])
    history = enh.checkpoint_metadata_
    assert history["best_val_sdri_db"] >= -1e9


def test_evaluate_without_frontend_and_with_identity(tiny_data, tiny_ckpts):
    kws = load_checkpoint(tiny_ckpts[2])
    base = evaluate(None, kws, tiny_data)
    assert base.sdri_db is None
    ident = evaluate(IdentityEnhancer(), kws, tiny_data)
    assert ident.sdri_db == 0.0
    assert (ident.acc_clean, ident.acc_noisy) == (base.acc_clean, base.acc_noisy)
    with pytest.raises(ValueError):
        evaluate(None, None, tiny_data)


def test_joint_rejects_double_freeze_and_missing_models(tmp_path, tiny_data, tiny_ckpts):
    _, se, kws = tiny_ckpts
    both = dataclasses.replace(TINY, freeze_frontend=True, freeze_backend=True)
    with pytest.raises(InvalidSpecError):
        train_joint(ExperimentSpec("j", both, tiny_data, run_dir=tmp_path, frontend_ckpt=se,
                                   backend_ckpt=kws))
    with pytest.raises(InvalidSpecError):
        train_joint(ExperimentSpec("j", TINY, tiny_data, run_dir=tmp_path, frontend_ckpt=se))


def test_joint_with_frozen_frontend_keeps_it(tmp_path, tiny_data, tiny_ckpts):
    _, se, kws = tiny_ckpts
    cfg = dataclasses.replace(TINY, freeze_frontend=True, peak_lr=1e-3)
    front, back = train_joint(ExperimentSpec("j", cfg, tiny_data, run_dir=tmp_path,
                                             frontend_ckpt=se, backend_ckpt=kws))
    assert tensor_digest(load_checkpoint(front)) == tensor_digest(load_checkpoint(se))
    assert load_checkpoint(back).checkpoint_metadata_["model_id"] == "M1"


def test_joint_from_fresh_models(tmp_path, tiny_data):
    cfg = dataclasses.replace(TINY, epochs=1, loss_mode="combined", beta=0.01)
    front, back = train_joint(ExperimentSpec(
        "j", cfg, tiny_data, run_dir=tmp_path, fresh_frontend=True, fresh_backend=True,
        frontend_params={"encoder_channels": 8, "bottleneck_channels": 4, "conv_channels": 8},
        backend_params={"channels": 4}))
    assert front.exists() and back.exists()


def test_frontend_gets_gradient_from_ce_alone(tiny_data, tiny_ckpts):
    enh = load_checkpoint(tiny_ckpts[1])
    kws = load_checkpoint(tiny_ckpts[2]).freeze()
    model = JointModel(enh.module_, kws.module_)
    X, y, S = tiny_data.noisy("validation")
    norms = batch_gradient_norms(model, torch.as_tensor(X, dtype=torch.float32),
                                 torch.as_tensor(S, dtype=torch.float32), torch.as_tensor(y),
                                 TrainConfig(freeze_backend=True))
    assert any(v > 0 for k, v in norms.items() if k.startswith("frontend."))
    assert not any(k.startswith("backend.") for k in norms)
