import dataclasses
import json

import pytest

from sekws.exceptions import InvalidSpecError
from sekws.harness import (REPORT_COLUMNS, DataSpec, MatrixRow, MatrixSpec, build_preset,
                           plot_sweep, read_report, read_sweep_csv, run_matrix)
from sekws.injection import write_sweep_csv
from sekws.pipeline import TrainConfig

TINY_DATA = DataSpec(n_classes=2, n_per_class=10, n_noise_files=1)
TINY_CFG = TrainConfig(epochs=1, warmup_epochs=0, peak_lr=0.02, batch_size=8)
SMALL_SE = {"encoder_channels": 8, "bottleneck_channels": 4, "conv_channels": 8}


def _row(row_id, kind, **kw):
    return MatrixRow(row_id, "t", kind, config=kw.pop("config", TINY_CFG), **kw)


def test_row_flat_roundtrip():
    for row in build_preset("paper").rows:
        assert MatrixRow.from_flat({k: str(v) for k, v in row.to_flat().items()}) == row


def test_data_spec_flat_roundtrip():
    flat = {k: str(v) for k, v in TINY_DATA.to_flat().items()}
    assert DataSpec.from_flat(flat) == TINY_DATA


def test_presets_are_valid_and_complete():
    for name in ("desk", "paper"):
        spec = build_preset(name)
        order = [r.row_id for r in spec.validate()]
        assert len(order) == len(spec.rows) == 18
        for row in spec.rows:
            for dep in row.depends:
                assert order.index(dep) < order.index(row.row_id)
    with pytest.raises(ValueError):
        build_preset("huge")


def test_unknown_kind_rejected():
    with pytest.raises(InvalidSpecError):
        MatrixRow("x", "t", "banana")


@pytest.mark.parametrize("rows, message", [
    ([_row("a", "kws"), _row("a", "kws")], "duplicate"),
    ([_row("a", "eval", backend_from="ghost")], "unknown row"),
    ([_row("a", "joint", frontend_from="b", backend_from="b"),
      _row("b", "joint", frontend_from="a", backend_from="a")], "cycle"),
])
def test_bad_matrix_rejected_before_any_work(tmp_path, rows, message):
    with pytest.raises(InvalidSpecError, match=message):
        run_matrix(MatrixSpec(rows, TINY_DATA), tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_empty_matrix_writes_header_only(tmp_path):
    assert run_matrix(MatrixSpec([], TINY_DATA), tmp_path) == []
    assert (tmp_path / "report.csv").read_text().strip() == ",".join(REPORT_COLUMNS)
    assert json.loads((tmp_path / "report.json").read_text()) == []


def test_failure_skips_dependents_only(tmp_path):
    both = dataclasses.replace(TINY_CFG, freeze_frontend=True, freeze_backend=True)
    rows = [
        _row("se", "se", frontend_params=SMALL_SE),
        _row("kws", "kws", backend_model_id="M1", backend_params={"channels": 4}),
        _row("bad", "joint", config=both, frontend_from="se", backend_from="kws"),
        _row("after-bad", "inject", frontend_from="bad", backend_from="bad", alpha="0.5"),
        _row("fine", "eval", frontend_from="se", backend_from="kws"),
    ]
    report = {r["row_id"]: r for r in run_matrix(MatrixSpec(rows, TINY_DATA), tmp_path)}
    assert report["bad"]["status"].startswith("failed: InvalidSpecError")
    assert report["after-bad"]["status"] == "skipped: bad failed"
    assert all(report[k]["status"] == "ok" for k in ("se", "kws", "fine"))
    assert not (tmp_path / "after-bad").exists()
    assert [r["row_id"] for r in read_report(tmp_path / "report.csv")] == [r.row_id for r in rows]


def test_desk_report_shape(desk_matrix):
    spec = build_preset("desk")
    report = read_report(desk_matrix.out / "report.csv")
    assert [r["row_id"] for r in report] == [r.row_id for r in spec.rows]
    assert list(report[0]) == list(REPORT_COLUMNS)
    assert json.loads((desk_matrix.out / "report.json").read_text()) == report
    for r in report:
        assert r["status"] == "ok"
        for col in ("acc_clean", "acc_noisy", "acc_avg"):
            if r[col]:
                assert 0.0 <= float(r[col]) <= 1.0
        if r["acc_clean"]:
            avg = (float(r["acc_clean"]) + float(r["acc_noisy"])) / 2
            assert abs(float(r["acc_avg"]) - avg) < 1e-12
    for row_id in ("t2-m1", "t3-m2-combined", "t4-m2-yn"):
        assert (desk_matrix.out / row_id / "config.txt").exists()
        assert (desk_matrix.out / row_id / "logs.csv").exists() or row_id.startswith("t4")


def test_tuned_rows_record_their_alpha(desk_matrix):
    for rid in ("t4-m2-yy", "t4-m2-ny", "t4-m2-yn", "t4-m2-nn"):
        alpha = float(desk_matrix.rows[rid]["alpha"])
        assert 0.0 <= alpha <= 1.0
        sweep = read_sweep_csv(desk_matrix.out / rid / "sweep_validation.csv")
        (points,) = sweep.values()
        best = max(acc for _, acc in points)
        assert alpha == next(a for a, acc in points if acc == best)


def _sweep(path, configs):
    grid = [i / 20 for i in range(21)]
    for i, name in enumerate(configs):
        write_sweep_csv(path, [(a, (a + i) / 2) for a in grid], "test", name, append=i > 0)
    return path


def test_plot_single_series(tmp_path):
    fig = plot_sweep(_sweep(tmp_path / "s.csv", ["yy"]), tmp_path / "out" / "s.png")
    (line,) = fig.axes[0].get_lines()
    assert len(line.get_xdata()) == 21
    assert (tmp_path / "out" / "s.png").stat().st_size > 0


def test_plot_two_series_have_legend(tmp_path):
    fig = plot_sweep(_sweep(tmp_path / "s.csv", ["yy", "ny"]), tmp_path / "s.svg")
    labels = [t.get_text() for t in fig.axes[0].get_legend().get_texts()]
    assert labels == ["yy (test)", "ny (test)"]


@pytest.mark.parametrize("body", ["alpha,split,accuracy,configuration\n",
                                  "alpha,split,accuracy,configuration\nx,test,0.5,yy\n",
                                  "a,b\n1,2\n"])
def test_plot_rejects_bad_csv_without_output(tmp_path, body):
    src = tmp_path / "s.csv"
    src.write_text(body)
    with pytest.raises(ValueError):
        plot_sweep(src, tmp_path / "s.png")
    assert not (tmp_path / "s.png").exists()
