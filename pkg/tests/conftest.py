from pathlib import Path

import numpy as np
import pytest
import torch

from sekws.checkpoint import load_checkpoint
from sekws.cli import main
from sekws.harness import build_preset, read_report

# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])


@pytest.fixture(autouse=True)
def _deterministic():
    torch.manual_seed(0)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class MatrixRun:
    def __init__(self, out: Path, rows: list[dict]):
        self.out = out
        self.rows = {r["row_id"]: r for r in rows}

    def ckpt(self, row_id: str, role: str) -> Path:
        return self.out / row_id / "checkpoints" / f"{role}.npz"

    def load(self, row_id: str, role: str):
        return load_checkpoint(self.ckpt(row_id, role))


@pytest.fixture(scope="session")
def desk_matrix(tmp_path_factory):
    """The full desk preset through ``sekws matrix``, once per session (about two minutes)."""
    out = tmp_path_factory.mktemp("desk_matrix")
    assert main(["matrix", "--preset", "desk", "--out", str(out), "--seed", "0"]) == 0
    return MatrixRun(out, read_report(out / "report.csv"))


@pytest.fixture(scope="session")
def desk_data():
    return build_preset("desk").data.build()
