"""Experiment matrix: rows, dependency order, consolidated report and sweep plots.

Each row owns ``<out>/<row_id>/`` and persists its full definition in
``config.txt`` there, so :func:`rerun_row` can reproduce it from disk.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import InvalidSpecError
from .injection import AlphaGrid, SoftSwitch, sweep_alpha, write_sweep_csv
from .pipeline import (DESK_PRESETS, PAPER_PRESETS, DataBundle, EvalReport, ExperimentSpec,
                       TrainConfig, evaluate, read_flat_config, train_joint, train_kws, train_se,
                       write_flat_config)

ROW_KINDS = ("se", "kws", "eval", "joint", "inject", "switch")
REPORT_COLUMNS = ("row_id", "table", "backend_model_id", "learning_rate", "freeze_frontend",
                  "freeze_backend", "loss_mode", "beta", "alpha", "sdri_db", "acc_clean",
                  "acc_noisy", "acc_avg", "status")
_JSON_KEYS = ("frontend_params", "backend_params")


@dataclass
class DataSpec:
    """Where a matrix gets its data: the procedural corpus or manifest files."""

    source: str = "synthetic"
    n_classes: int = 4
    n_per_class: int = 60
    seed: int = 0
    eval_seed: int = 1234
    n_noise_files: int = 6
    manifest: str = ""
    noise_train: str = ""
    noise_validation: str = ""
    noise_test: str = ""

    def build(self) -> DataBundle:
        if self.source == "synthetic":
            return DataBundle.synthetic(self.n_classes, self.n_per_class, self.seed,
                                        self.n_noise_files, eval_seed=self.eval_seed)
        if self.source == "manifest":
            noise = {"train": self.noise_train, "validation": self.noise_validation,
                     "test": self.noise_test}
            noise = {k: v for k, v in noise.items() if v}
            if not self.manifest or "train" not in noise:
                raise InvalidSpecError("manifest data needs a manifest and a train noise list")
            return DataBundle.from_manifests(self.manifest, noise, eval_seed=self.eval_seed)
        raise InvalidSpecError(f"unknown data source {self.source!r}")

    def to_flat(self) -> dict:
        return {f"data.{k}": v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_flat(cls, values: dict) -> "DataSpec":
        kwargs = {}
        for f in dataclasses.fields(cls):
            raw = values.get(f"data.{f.name}")
            if raw is not None:
                kwargs[f.name] = int(raw) if f.type in ("int", int) else raw
        return cls(**kwargs)


@dataclass
class MatrixRow:
    row_id: str
    table: str
    kind: str
    config: TrainConfig = field(default_factory=TrainConfig)
    frontend_from: str | None = None
    backend_from: str | None = None
    condition: str = "clean"
    alpha: str = ""
    backend_model_id: str = ""
    frontend_params: dict = field(default_factory=dict)
    backend_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ROW_KINDS:
            raise InvalidSpecError(f"row {self.row_id}: unknown kind {self.kind!r}")

    @property
    def depends(self) -> list[str]:
        return [d for d in (self.frontend_from, self.backend_from) if d]

    def to_flat(self) -> dict:
        out = {"row_id": self.row_id, "table": self.table, "kind": self.kind,
               "frontend_from": self.frontend_from or "", "backend_from": self.backend_from or "",
               "condition": self.condition, "alpha": self.alpha,
               "backend_model_id": self.backend_model_id}
        out.update(self.config.to_flat())
        for k in _JSON_KEYS:
            out[k] = json.dumps(getattr(self, k), sort_keys=True)
        return out

    @classmethod
    def from_flat(cls, values: dict) -> "MatrixRow":
        return cls(row_id=values["row_id"], table=values["table"], kind=values["kind"],
                   config=TrainConfig.from_flat(values),
                   frontend_from=values.get("frontend_from") or None,
                   backend_from=values.get("backend_from") or None,
                   condition=values.get("condition", "clean"), alpha=values.get("alpha", ""),
                   backend_model_id=values.get("backend_model_id", ""),
                   **{k: json.loads(values.get(k) or "{}") for k in _JSON_KEYS})


@dataclass
class MatrixSpec:
    rows: list[MatrixRow] = field(default_factory=list)
    data: DataSpec = field(default_factory=DataSpec)

    def validate(self) -> list[MatrixRow]:
        """Rows in dependency order; raises InvalidSpecError on duplicates, dangling refs or cycles."""
        by_id = {}
        for row in self.rows:
            if row.row_id in by_id:
                raise InvalidSpecError(f"duplicate row id {row.row_id!r}")
            by_id[row.row_id] = row
        for row in self.rows:
            for dep in row.depends:
                if dep not in by_id:
                    raise InvalidSpecError(f"row {row.row_id!r} depends on unknown row {dep!r}")
        order, state = [], {}

        def visit(rid, path):
            if state.get(rid) == "done":
                return
            if state.get(rid) == "active":
                raise InvalidSpecError("dependency cycle: " + " -> ".join(path + [rid]))
            state[rid] = "active"
            for dep in by_id[rid].depends:
                visit(dep, path + [rid])
            state[rid] = "done"
            order.append(by_id[rid])

        for row in self.rows:
            visit(row.row_id, [])
        return order


def _cfg(base: TrainConfig, **kw) -> TrainConfig:
    return dataclasses.replace(base, **kw)


def build_preset(name: str = "desk", data: DataSpec | None = None) -> MatrixSpec:
    """Baselines, SE, Table-3 style joint rows, injection rows and the switch row."""
    if name == "desk":
        presets, joint_lr = DESK_PRESETS, {"M1": (1e-3, 1e-3, 1e-3), "M2": (1e-3, 1e-3, 1e-3)}
    elif name == "paper":
        presets, joint_lr = PAPER_PRESETS, {"M1": (1e-4, 1e-3, 1e-4), "M2": (1e-5, 1e-3, 1e-5)}
    else:
        raise InvalidSpecError(f"unknown preset {name!r}")
    se, kws, joint = presets["se"], presets["kws"], presets["joint"]
    rows = [
        MatrixRow("t1-se-causal", "1", "se", se),
        MatrixRow("t1-se-noncausal", "1", "se", se, frontend_params={"causal": False}),
        MatrixRow("t2-m1", "2", "kws", kws, condition="clean", backend_model_id="M1"),
        MatrixRow("t2-m2", "2", "kws", kws, condition="noisy", backend_model_id="M2"),
    ]
    for mid in ("M1", "M2"):
        base = f"t2-{mid.lower()}"
        lr_nf, lr_fb, lr_nn = joint_lr[mid]
        rows.append(MatrixRow(f"t3-{mid.lower()}-yy", "3", "eval", _cfg(
            joint, freeze_frontend=True, freeze_backend=True),
            "t1-se-causal", base, backend_model_id=mid))
        for tag, ff, fb, lr in (("ny", False, True, lr_nf), ("yn", True, False, lr_fb),
                                ("nn", False, False, lr_nn)):
            rows.append(MatrixRow(f"t3-{mid.lower()}-{tag}", "3", "joint", _cfg(
                joint, peak_lr=lr, freeze_frontend=ff, freeze_backend=fb),
                "t1-se-causal", base, backend_model_id=mid))
    rows.append(MatrixRow("t3-m2-combined", "3", "joint", _cfg(
        joint, peak_lr=joint_lr["M2"][2], loss_mode="combined", beta=0.01),
        "t1-se-causal", "t2-m2", backend_model_id="M2"))
    for tag in ("yy", "ny", "yn", "nn"):
        src = f"t3-m2-{tag}"
        rows.append(MatrixRow(f"t4-m2-{tag}", "4", "inject",
                              next(r.config for r in rows if r.row_id == src),
                              src, src, alpha="tuned", backend_model_id="M2"))
    rows.append(MatrixRow("t4-m2-switch", "4", "switch", presets["switch"],
                          "t1-se-causal", "t2-m2", alpha="predicted", backend_model_id="M2"))
    return MatrixSpec(rows, data or DataSpec())


# --- execution -------------------------------------------------------------------------------

def _fmt(v) -> str:
    """Report cells are strings so report.csv and report.json carry identical values."""
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _report_row(row: MatrixRow, report: EvalReport | None, alpha="", status="ok",
                sdri=None) -> dict:
    out = {"row_id": row.row_id, "table": row.table, "backend_model_id": row.backend_model_id,
           "learning_rate": row.config.peak_lr if row.kind in ("joint", "switch") else "",
           "freeze_frontend": row.config.freeze_frontend if row.kind in ("joint", "eval", "inject")
           else "",
           "freeze_backend": row.config.freeze_backend if row.kind in ("joint", "eval", "inject")
           else "",
           "loss_mode": row.config.loss_mode if row.kind == "joint" else "",
           "beta": row.config.beta if row.kind == "joint" else "",
           "alpha": alpha, "sdri_db": sdri, "acc_clean": None, "acc_noisy": None,
           "acc_avg": None, "status": status}
    if report is not None:
        out.update(sdri_db=report.sdri_db, acc_clean=report.acc_clean,
                   acc_noisy=report.acc_noisy, acc_avg=report.acc_avg)
    return {k: _fmt(v) for k, v in out.items()}


def _write_rows(path: Path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def execute_row(row: MatrixRow, data: DataBundle, run_dir, inputs: dict,
                data_spec: DataSpec | None = None) -> tuple[dict, dict]:
    """Run one row; ``inputs`` maps ``frontend``/``backend`` to checkpoint paths.

    Returns (outputs, report row). Outputs map roles to checkpoint paths.
    """
    run_dir = Path(run_dir)
    extra = {**row.to_flat(), **(data_spec or DataSpec()).to_flat()}
    spec = ExperimentSpec(row.row_id, row.config, data, run_dir=run_dir,
                          frontend_ckpt=inputs.get("frontend"),
                          backend_ckpt=inputs.get("backend"),
                          frontend_params=row.frontend_params,
                          backend_params=row.backend_params, extra_config=extra)
    outputs = dict(inputs)
    alpha = ""
    if row.kind == "se":
        outputs["frontend"] = train_se(spec)
        enh = load_checkpoint(outputs["frontend"])
        Xn, _, S = data.noisy("test")
        result = _report_row(row, None, sdri=enh.score(Xn, S))
    elif row.kind == "kws":
        outputs["backend"] = train_kws(spec, row.condition)
        report = evaluate(None, load_checkpoint(outputs["backend"]), data,
                          experiment_id=row.row_id)
        result = _report_row(row, report)
    else:
        if not (inputs.get("frontend") and inputs.get("backend")):
            raise InvalidSpecError(f"row {row.row_id} needs frontend and backend checkpoints")
        spec.write_config({"regime": row.kind})
        if row.kind == "joint":
            outputs["frontend"], outputs["backend"] = train_joint(spec)
        enh = load_checkpoint(outputs["frontend"])
        kws = load_checkpoint(outputs["backend"])
        switch = None
        a = None
        if row.kind == "inject":
            a = tune_alpha(enh, kws, data, run_dir)
            alpha = a
        elif row.kind == "switch":
            switch = _train_switch(row, enh, kws, data)
            outputs["switch"] = save_checkpoint(spec.checkpoint_dir / "switch.npz", switch,
                                                {"experiment_id": row.row_id})
            alpha = "predicted"
        report = evaluate(enh, kws, data, alpha=a, switch=switch, experiment_id=row.row_id)
        result = _report_row(row, report, alpha=alpha)
    _write_rows(run_dir / "report.csv", [result])
    return {k: str(v) for k, v in outputs.items() if v}, result


def tune_alpha(enh, kws, data: DataBundle, run_dir: Path, grid: AlphaGrid | None = None) -> float:
    """Pick alpha on the noisy validation sweep (first maximum); also record the test sweep."""
    grid = grid or AlphaGrid()
    sweeps = {}
    for split in ("validation", "test"):
        X, y, _ = data.noisy(split)
        sweeps[split] = sweep_alpha(enh, kws, X, y, grid)
        write_sweep_csv(run_dir / f"sweep_{split}.csv", sweeps[split], split, run_dir.name)
    accs = [acc for _, acc in sweeps["validation"]]
    return float(sweeps["validation"][int(np.argmax(accs))][0])


def _train_switch(row: MatrixRow, enh, kws, data: DataBundle) -> SoftSwitch:
    cfg = row.config
    X, y, _ = data.noisy("train")
    Xv, yv, _ = data.noisy("validation")
    switch = SoftSwitch(epochs=cfg.epochs, peak_lr=cfg.peak_lr, warmup_epochs=cfg.warmup_epochs,
                        momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                        batch_size=cfg.batch_size, random_state=cfg.seed)
    return switch.fit(X, y, enhancer=enh, spotter=kws, eval_set=(Xv, yv))


def run_matrix(spec: MatrixSpec, out_dir, log: Callable[[str], None] | None = None
               ) -> list[dict]:
    """Execute every row in dependency order and write ``report.csv`` plus ``report.json``.

    A failed row marks its dependents as skipped; independent rows still run.
    """
    order = spec.validate()
    out_dir = Path(out_dir).resolve()
    out_dir.mkdir(parents=True, exist_ok=True)
    write_flat_config(out_dir / "data.txt", spec.data.to_flat())
    data = spec.data.build() if order else None
    outputs: dict[str, dict] = {}
    failed: set[str] = set()
    results = {}
    for row in order:
        bad = [d for d in row.depends if d in failed]
        if bad:
            failed.add(row.row_id)
            results[row.row_id] = _report_row(row, None, status=f"skipped: {bad[0]} failed")
            continue
        inputs = {}
        if row.frontend_from:
            inputs["frontend"] = outputs[row.frontend_from].get("frontend")
        if row.backend_from:
            inputs["backend"] = outputs[row.backend_from].get("backend")
        try:
            outputs[row.row_id], results[row.row_id] = execute_row(
                row, data, out_dir / row.row_id, inputs, spec.data)
        except Exception as exc:  # noqa: BLE001 -- a failing row must not stop the matrix
            failed.add(row.row_id)
            results[row.row_id] = _report_row(row, None,
                                              status=f"failed: {type(exc).__name__}: {exc}")
        if log:
            log(f"{row.row_id}: {results[row.row_id]['status']}")
    rows = [results[r.row_id] for r in spec.rows]
    _write_rows(out_dir / "report.csv", rows)
    (out_dir / "report.json").write_text(json.dumps(rows, indent=2))
    _merge_sweeps(out_dir, [r.row_id for r in spec.rows if r.kind == "inject"])
    return rows


def _merge_sweeps(out_dir: Path, row_ids: list[str]):
    for split in ("validation", "test"):
        parts = [out_dir / rid / f"sweep_{split}.csv" for rid in row_ids]
        parts = [p for p in parts if p.exists()]
        if not parts:
            continue
        with open(out_dir / f"sweep_{split}.csv", "w", newline="") as fh:
            for i, p in enumerate(parts):
                lines = p.read_text().splitlines(keepends=True)
                fh.writelines(lines if i == 0 else lines[1:])


def rerun_row(row_dir, out_dir) -> dict:
    """Re-execute a row from its persisted ``config.txt`` into ``out_dir``.

    Returns the report row as it reads back from ``out_dir/report.csv``, so it compares equal
    to the matching row of the original matrix report.
    """
    values = read_flat_config(Path(row_dir) / "config.txt")
    row = MatrixRow.from_flat(values)
    data_spec = DataSpec.from_flat(values)
    inputs = {k: values[f"{k}_ckpt"] for k in ("frontend", "backend") if values.get(f"{k}_ckpt")}
    if row.kind in ("se", "kws"):
        inputs = {}
    execute_row(row, data_spec.build(), out_dir, inputs, data_spec)
    return read_report(Path(out_dir) / "report.csv")[0]


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- plots -----------------------------------------------------------------------------------

def read_sweep_csv(path) -> dict[str, list[tuple[float, float]]]:
    """Series keyed by ``configuration/split``, each sorted by alpha."""
    series: dict[str, list[tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"alpha", "split", "accuracy"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: not a sweep CSV (missing {sorted(missing)})")
        for lineno, rec in enumerate(reader, 2):
            try:
                point = (float(rec["alpha"]), float(rec["accuracy"]))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row") from exc
            key = rec.get("configuration") or "default"
            if rec.get("split"):
                key = f"{key} ({rec['split']})"
            series.setdefault(key, []).append(point)
    if not series:
        raise ValueError(f"{path}: sweep CSV has no rows")
    return {k: sorted(v) for k, v in series.items()}


def plot_sweep(sweep_csv, out_image):
    """Accuracy-vs-alpha line chart, one series per configuration. Returns the Figure."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = read_sweep_csv(sweep_csv)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, pts in series.items():
        a, acc = zip(*pts)
        ax.plot(a, acc, marker="o", markersize=3, label=name)
    ax.set_xlim(0, 1)
    ax.set_xlabel("alpha")
    ax.set_ylabel("accuracy")
    ax.grid(alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    out_image = Path(out_image)
    out_image.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_image)
    plt.close(fig)
    return fig
