"""Command-line entry point (``sekws``).

Exit status: 0 on success, 2 on usage errors, 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import datamix
from .audio import read_wav, write_wav
from .checkpoint import load_checkpoint, save_checkpoint
from .harness import DataSpec, build_preset, plot_sweep, rerun_row, run_matrix
from .injection import AlphaGrid, SoftSwitch, sweep_alpha, write_sweep_csv
from .pipeline import (DESK_PRESETS, PAPER_PRESETS, DataBundle, ExperimentSpec, TrainConfig,
                       evaluate, read_flat_config, train_joint, train_kws, train_se,
                       write_accuracy_rows)

_PRESETS = {"desk": DESK_PRESETS, "paper": PAPER_PRESETS}


class UsageError(Exception):
    pass


# --- argument groups -------------------------------------------------------------------------

def _add_seed(p):
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")


def _add_data(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", type=Path,
                   help="corpus directory written by synth-data (manifest.csv, noise_<split>.csv);"
                        " without it a procedural corpus is generated in memory from --seed")
    g.add_argument("--classes", type=int, default=4, help="procedural corpus classes")
    g.add_argument("--per-class", type=int, default=60, help="procedural utterances per class")
    g.add_argument("--eval-seed", type=int, default=1234,
                   help="seed of the frozen noisy validation/test sets")


def _add_train(p, stage):
    g = p.add_argument_group("training")
    g.add_argument("--out", type=Path, required=True, help="run directory")
    g.add_argument("--preset", choices=sorted(_PRESETS), default="desk")
    g.add_argument("--config", type=Path, help="flat 'key = value' file of TrainConfig fields")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float, dest="peak_lr")
    g.add_argument("--warmup-epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--sdr-variant", choices=("plain", "si"))
    p.set_defaults(stage=stage)


def _data_from_args(args) -> DataBundle:
    if args.data is None:
        return DataSpec("synthetic", args.classes, args.per_class, args.seed,
                        args.eval_seed).build()
    root = args.data
    if not (root / "manifest.csv").exists():
        raise UsageError(f"{root} has no manifest.csv")
    noise = {s: root / f"noise_{s}.csv" for s in datamix.SPLITS
             if (root / f"noise_{s}.csv").exists()}
    if "train" not in noise:
        raise UsageError(f"{root} has no noise_train.csv")
    return DataBundle.from_manifests(root / "manifest.csv", noise, eval_seed=args.eval_seed)


def _config_from_args(args, **fixed) -> TrainConfig:
    values = _PRESETS[args.preset][args.stage].to_flat()
    if args.config is not None:
        values.update(read_flat_config(args.config))
    values["seed"] = args.seed
    cfg = TrainConfig.from_flat(values)
    cli = {k: getattr(args, k) for k in ("epochs", "peak_lr", "warmup_epochs", "batch_size",
                                         "sdr_variant") if getattr(args, k, None) is not None}
    cli.update({k: v for k, v in fixed.items() if v is not None})
    return dataclasses.replace(cfg, **cli)


def _load(path, what):
    if path is None:
        return None
    if not Path(path).exists():
        raise UsageError(f"{what} checkpoint {path} does not exist")
    return load_checkpoint(path)


# --- subcommands -----------------------------------------------------------------------------

def cmd_synth_data(args):
    paths = datamix.synthesize_corpus_tree(args.out, args.classes, args.per_class, args.seed,
                                           args.noise_files, args.noise_seconds)
    for k, v in paths.items():
        print(f"{k}: {v}")


def cmd_mix(args):
    clean = read_wav(args.clean)
    noise = read_wav(args.noise)
    rng = datamix.worker_rng(args.seed)
    segment = datamix.sample_noise_segment(noise, clean.duration_s, rng)
    mix = datamix.mix_at_snr(clean, segment, args.snr)
    write_wav(args.out, mix.mixture)
    print(f"wrote {args.out} (snr {mix.measured_snr_db():.3f} dB, gain {mix.gain:.6g})")


def cmd_train_se(args):
    cfg = _config_from_args(args)
    spec = ExperimentSpec("train-se", cfg, _data_from_args(args), run_dir=args.out,
                          frontend_params={"causal": not args.non_causal})
    print(train_se(spec))


def cmd_train_kws(args):
    cfg = _config_from_args(args)
    spec = ExperimentSpec(f"train-kws-{args.condition}", cfg, _data_from_args(args),
                          run_dir=args.out)
    print(train_kws(spec, args.condition))


def cmd_train_joint(args):
    if args.frontend is None and not args.fresh_frontend:
        raise UsageError("train-joint needs --frontend or --fresh-frontend")
    if args.backend is None and not args.fresh_backend:
        raise UsageError("train-joint needs --backend or --fresh-backend")
    cfg = _config_from_args(args, freeze_frontend=args.freeze_frontend,
                            freeze_backend=args.freeze_backend, loss_mode=args.loss_mode,
                            beta=args.beta)
    spec = ExperimentSpec("train-joint", cfg, _data_from_args(args), run_dir=args.out,
                          frontend_ckpt=args.frontend, backend_ckpt=args.backend,
                          fresh_frontend=args.fresh_frontend, fresh_backend=args.fresh_backend)
    for path in train_joint(spec):
        print(path)


def cmd_train_switch(args):
    enh = _load(args.frontend, "frontend")
    kws = _load(args.backend, "backend")
    cfg = _config_from_args(args)
    data = _data_from_args(args)
    X, y, _ = data.noisy("train")
    Xv, yv, _ = data.noisy("validation")
    switch = SoftSwitch(epochs=cfg.epochs, peak_lr=cfg.peak_lr, warmup_epochs=cfg.warmup_epochs,
                        momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                        batch_size=cfg.batch_size, n_mels=args.n_mels, random_state=cfg.seed)
    switch.fit(X, y, enhancer=enh, spotter=kws, eval_set=(Xv, yv))
    print(save_checkpoint(Path(args.out) / "checkpoints" / "switch.npz", switch,
                          {"regime": "switch"}))


def cmd_eval(args):
    if args.backend is None:
        raise UsageError("eval needs --backend")
    enh = _load(args.frontend, "frontend")
    kws = _load(args.backend, "backend")
    switch = _load(args.switch, "switch")
    if (args.alpha is not None or switch is not None) and enh is None:
        raise UsageError("--alpha and --switch need --frontend")
    report = evaluate(enh, kws, _data_from_args(args), alpha=args.alpha, switch=switch,
                      split=args.split, experiment_id=args.id)
    row = report.as_row()
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow(row)
        model_id = getattr(kws, "checkpoint_metadata_", {}).get("model_id", args.id)
        write_accuracy_rows(args.out / "accuracy.csv", model_id, report, args.split)
    for k, v in row.items():
        print(f"{k}: {v}")


def cmd_sweep_alpha(args):
    if args.backend is None:
        raise UsageError("sweep-alpha needs --backend")
    enh = _load(args.frontend, "frontend")
    kws = _load(args.backend, "backend")
    if args.points < 2:
        raise UsageError("--points must be at least 2")
    data = _data_from_args(args)
    X, y, _ = data.noisy(args.split)
    rows = sweep_alpha(enh, kws, X, y, AlphaGrid(tuple(np.linspace(0, 1, args.points))))
    write_sweep_csv(args.out, rows, args.split, args.configuration, append=args.append)
    for a, acc in rows:
        print(f"{a:.3f},{acc:.6f}")


def cmd_matrix(args):
    if args.rerun is not None:
        row = rerun_row(args.rerun, args.out)
        print(",".join(f"{k}={v}" for k, v in row.items()))
        return
    data = DataSpec("synthetic", args.classes, args.per_class, args.seed, args.eval_seed)
    if args.data is not None:
        data = DataSpec("manifest", seed=args.seed, eval_seed=args.eval_seed,
                        manifest=str(args.data / "manifest.csv"),
                        **{f"noise_{s}": str(args.data / f"noise_{s}.csv")
                           for s in datamix.SPLITS if (args.data / f"noise_{s}.csv").exists()})
    spec = build_preset(args.preset, data)
    for row in spec.rows:
        row.config = dataclasses.replace(row.config, seed=args.seed)
    rows = run_matrix(spec, args.out, log=lambda m: print(m, flush=True))
    failed = [r["row_id"] for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} rows, {len(failed)} not ok; report at {Path(args.out) / 'report.csv'}")
    if failed:
        raise RuntimeError("rows not ok: " + ", ".join(failed))


def cmd_plot(args):
    plot_sweep(args.sweep, args.out)
    print(args.out)


# --- parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sekws", description=(
        "Speech enhancement frontends for keyword spotting: data, training, "
        "injection and experiment matrix."))
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth-data", help="write a procedural keyword corpus and noise lists")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=60)
    p.add_argument("--noise-files", type=int, default=6)
    p.add_argument("--noise-seconds", type=float, default=10.0)
    _add_seed(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("mix", help="mix a clean WAV with a random noise segment at a given SNR")
    p.add_argument("--clean", type=Path, required=True)
    p.add_argument("--noise", type=Path, required=True)
    p.add_argument("--snr", type=float, required=True, help="target SNR in dB")
    p.add_argument("--out", type=Path, required=True)
    _add_seed(p)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("train-se", help="train the enhancer with the negative-SDR loss")
    _add_train(p, "se")
    p.add_argument("--non-causal", action="store_true")
    _add_data(p)
    _add_seed(p)
    p.set_defaults(func=cmd_train_se)

    p = sub.add_parser("train-kws", help="train a spotter on clean (M1) or noisy (M2) audio")
    _add_train(p, "kws")
    p.add_argument("--condition", choices=("clean", "noisy"), required=True)
    _add_data(p)
    _add_seed(p)
    p.set_defaults(func=cmd_train_kws)

    p = sub.add_parser("train-joint", help="fine-tune enhancer and spotter together")
    _add_train(p, "joint")
    p.add_argument("--frontend", type=Path, help="enhancer checkpoint")
    p.add_argument("--backend", type=Path, help="spotter checkpoint")
    p.add_argument("--fresh-frontend", action="store_true")
    p.add_argument("--fresh-backend", action="store_true")
    p.add_argument("--freeze-frontend", action="store_true", default=None)
    p.add_argument("--freeze-backend", action="store_true", default=None)
    p.add_argument("--loss-mode", choices=("ce_only", "combined"))
    p.add_argument("--beta", type=float, help="SDR weight for --loss-mode combined")
    _add_data(p)
    _add_seed(p)
    p.set_defaults(func=cmd_train_joint)

    p = sub.add_parser("train-switch", help="train the per-utterance injection-weight model")
    _add_train(p, "switch")
    p.add_argument("--frontend", type=Path, required=True)
    p.add_argument("--backend", type=Path, required=True)
    p.add_argument("--n-mels", type=int, default=64)
    _add_data(p)
    _add_seed(p)
    p.set_defaults(func=cmd_train_switch)

    p = sub.add_parser("eval", help="SDRi and clean/noisy accuracy for a frontend/backend pair")
    p.add_argument("--backend", type=Path)
    p.add_argument("--frontend", type=Path)
    p.add_argument("--alpha", type=float, help="fixed injection weight")
    p.add_argument("--switch", type=Path, help="switch checkpoint for predicted weights")
    p.add_argument("--split", choices=datamix.SPLITS, default="test")
    p.add_argument("--id", default="eval", help="experiment id for the report")
    p.add_argument("--out", type=Path, help="directory for report.csv and accuracy.csv")
    _add_data(p)
    _add_seed(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-alpha", help="accuracy over a grid of injection weights")
    p.add_argument("--backend", type=Path)
    p.add_argument("--frontend", type=Path, help="omit for the identity frontend")
    p.add_argument("--split", choices=datamix.SPLITS, default="validation")
    p.add_argument("--points", type=int, default=21)
    p.add_argument("--configuration", default="default")
    p.add_argument("--append", action="store_true")
    p.add_argument("--out", type=Path, required=True, help="sweep CSV")
    _add_data(p)
    _add_seed(p)
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("matrix", help="run the experiment matrix or re-run one row")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--rerun", type=Path, metavar="ROW_DIR",
                   help="re-execute one row from its persisted config into --out")
    _add_data(p)
    _add_seed(p)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("plot", help="accuracy-vs-alpha chart from a sweep CSV")
    p.add_argument("--sweep", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="PNG or SVG path")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sekws {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 -- every runtime failure maps to exit 1
        print(f"sekws {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
