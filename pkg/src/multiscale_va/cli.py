"""Command line: ``multiscale-va {synth,train,eval,gradcheck,report}``.

Exit status is 0 on success, 1 on bad input or usage, 2 on internal errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import SCENARIOS, all_windows, load_dataset, materialize, scenario_split, synth_dataset, write_dataset
from .errors import InputError, ParameterError
from .evaluation import EvalReport, evaluate
from .model import PRESETS, ModelConfig, load_checkpoint, save_checkpoint
from .training import ScheduleConfig, grad_check, train

log = logging.getLogger("multiscale_va")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="multiscale-va", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset directory")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--subjects", type=int, default=4)
    s.add_argument("--videos", type=int, default=8)
    s.add_argument("--duration", type=float, default=60.0, help="seconds per trial")
    s.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train a model and write checkpoint + manifest")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--weight-decay", type=float, default=0.01)
    t.add_argument("--hop", type=int, default=1000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--scenario", choices=SCENARIOS, help="train on this scenario fold's training side")
    t.add_argument("--fold", type=int, default=0)

    e = sub.add_parser("eval", help="evaluate a checkpoint on every scenario")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--scenarios", nargs="+", choices=SCENARIOS, default=list(SCENARIOS))
    e.add_argument("--hop", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--refit-epochs", type=int, default=0,
                   help="if > 0, train a fresh model per fold for this many epochs instead of "
                        "reusing the checkpoint weights")
    e.add_argument("--batch-size", type=int, default=16)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--entries", type=int, default=6, help="coordinates checked per parameter array")

    r = sub.add_parser("report", help="print a saved evaluation report")
    r.add_argument("report", type=Path)
    r.add_argument("--figure", type=Path, help="also render the bar chart here")
    return p


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def cmd_synth(args) -> int:
    trials = synth_dataset(args.seed, args.subjects, args.videos, args.duration)
    write_dataset(trials, args.out)
    _write_json(args.out / "dataset.json", {"generator": "synth_dataset", "seed": args.seed,
                                            "subjects": args.subjects, "videos": args.videos,
                                            "duration_s": args.duration})
    print(f"wrote {len(trials)} trials to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_training

    config = ModelConfig.preset(args.preset, seed=args.seed)
    trials = load_dataset(args.data)
    if args.scenario:
        plan = scenario_split(trials, args.scenario, args.fold, seed=args.seed, seq_len=config.seq_len,
                              hop=args.hop)
        fold = materialize(plan, trials, config.seq_len, args.hop)
        train_set, val_set, stats = fold.train, fold.test, fold.stats
    else:
        train_set, stats = all_windows(trials, config.seq_len, args.hop)
        val_set = []
    if not train_set:
        raise InputError("no training windows (trials shorter than seq_len?)")
    steps = -(-len(train_set) // args.batch_size)
    sched = ScheduleConfig(lr_max=args.lr, lr_min=min(1e-6, args.lr), T0=steps)
    report = train(train_set, val_set, config, sched, epochs=args.epochs, batch_size=args.batch_size,
                   seed=args.seed, weight_decay=args.weight_decay,
                   on_epoch=lambda ep, loss, val: print(f"epoch {ep:3d}  train_mse {loss:.5f}  val_rmse {val:.5f}"))
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = save_checkpoint(args.out / "checkpoint.json", report.params)
    report.checkpoint = str(ckpt)
    train_doc = report.to_dict()
    train_doc.pop("seconds")
    _write_json(args.out / "train_report.json", train_doc)
    plot_training(report.train_loss, report.val_rmse, args.out / "training.png")
    dataset_meta = args.data / "dataset.json"
    _write_json(args.out / "manifest.json", {
        "config": config.to_dict(),
        "preset": args.preset,
        "seeds": {"init": config.seed, "shuffle": args.seed},
        "training": {"epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
                     "weight_decay": args.weight_decay, "hop": args.hop, "schedule": vars(sched),
                     "scenario": args.scenario, "fold": args.fold if args.scenario else None,
                     "n_train_windows": len(train_set), "n_val_windows": len(val_set)},
        "standardization": stats.to_dict(),
        "dataset": {"path": str(args.data), "n_trials": len(trials),
                    "description": json.loads(dataset_meta.read_text()) if dataset_meta.exists() else None},
        "checkpoint": str(ckpt),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "wall_seconds": report.seconds,
        "python": platform.python_version(),
        "numpy": np.__version__,
    })
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_eval(args) -> int:
    from .plotting import plot_report

    params = load_checkpoint(args.checkpoint)
    trials = load_dataset(args.data)
    fit = None
    if args.refit_epochs > 0:
        def fit(samples, label):
            if not samples:
                raise InputError(f"{label}: no training windows")
            return train(samples, [], params.config, epochs=args.refit_epochs,
                         batch_size=args.batch_size, seed=args.seed).params
    report = evaluate(params, trials, args.scenarios, seed=args.seed, hop=args.hop, fit=fit)
    args.out.mkdir(parents=True, exist_ok=True)
    report.save(args.out / "report.json")
    table = report.to_table()
    (args.out / "report.txt").write_text(table)
    (args.out / "report.csv").write_text(report.to_csv())
    plot_report(report, args.out / "report.png")
    print(table, end="")
    return 0


def cmd_gradcheck(args) -> int:
    config = ModelConfig.preset(args.preset)
    if args.preset == "full":
        raise ParameterError("the full-size preset is too large for a finite-difference check")
    start = time.perf_counter()
    result = grad_check(config, eps=args.eps, tolerance=args.tol, seed=args.seed,
                        entries_per_group=args.entries)
    for name, err in result.errors.items():
        print(f"{name:32s} {'no gradient' if err is None else f'{err:.3e}'}")
    print(f"max relative error {result.max_error:.3e} (tol {args.tol:g}); "
          f"{result.checked_entries} entries checked, {result.skipped_entries} skipped at relu kinks; "
          f"{time.perf_counter() - start:.1f}s")
    return 0 if result.passed else 1


def cmd_report(args) -> int:
    report = EvalReport.load(args.report)
    print(report.to_table(), end="")
    if args.figure:
        from .plotting import plot_report

        plot_report(report, args.figure)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (InputError, ParameterError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
