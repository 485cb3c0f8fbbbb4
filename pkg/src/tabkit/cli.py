"""Command line: ``tabkit {gen,train,eval,grid,report}``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .dataset import gen_cmnist, gen_even_odd, group_weights, import_idx, read_tabd, write_tabd
from .grid import ConfigError, RunConfig, materialize_task, run_cell, run_grid
from .metrics import EvalRecord
from .nn import load_model, predict_dataset
from .report import ReportError, write_report


def cmd_gen(args) -> int:
    source = import_idx(args.idx_images, args.idx_labels) if args.idx_images else None
    fn = gen_even_odd if args.task == "even_odd" else gen_cmnist
    splits = fn(args.n_train, args.n_val, args.p, args.seed, source=source, n_test=args.n_test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in splits.items():
        write_tabd(ds, out / f"{name}.tabd")
        print(f"{name}: {len(ds)} samples, group counts {ds.group_counts().tolist()}")
    return 0


def _run_from_flags(args) -> RunConfig:
    data = Path(args.data)
    task = {"generator": "tabd", **{s: str(data / f"{s}.tabd") for s in ("train", "val", "test")}}
    model = {"kind": args.model, "hidden": args.hidden}
    train = {"optimizer": args.optimizer, "lr": args.lr, "weight_decay": args.weight_decay,
             "batch_size": args.batch_size, "max_epochs": args.max_epochs}
    params = {}
    if args.method == "jtt":
        params = {"identifier_epochs": args.identifier_epochs, "upweight": args.upweight}
    elif args.method == "gdro":
        params = {"gamma": args.gamma}
    return RunConfig(task, model, train, args.method, params, args.seed)


def cmd_train(args) -> int:
    if args.config:
        run = RunConfig.from_ini(args.config)
        if run.task.get("generator") != "tabd":
            run.task = materialize_task(run.task, Path(args.out) / "data")
        if args.seed is not None:
            run.seed = args.seed
    else:
        if not args.data:
            raise ConfigError("train needs --config or --data")
        args.seed = 0 if args.seed is None else args.seed
        run = _run_from_flags(args)
    row = run_cell(run, args.out)
    print(json.dumps(row, indent=1, sort_keys=True))
    return 0 if row["status"] == "ok" else 1


def cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = read_tabd(args.data)
    rec = EvalRecord(predict_dataset(model, ds), ds.labels, ds.groups, ds.num_groups)
    out = {"mean_acc": rec.mean_acc}
    if ds.groups is not None:
        out["wga"] = rec.wga
        out["group_acc"] = [None if np.isnan(a) else float(a) for a in rec.group_acc()]
        if args.train_data:
            out["weighted_mean_acc"] = rec.weighted_mean_acc(group_weights(read_tabd(args.train_data), ds))
    if args.out:
        Path(args.out).write_text(rec.to_csv())
    print(json.dumps(out, indent=1))
    return 0


def cmd_grid(args) -> int:
    result = run_grid(args.config, args.out, workers=args.workers)
    if result.grid is not None:
        print(result.grid.to_csv(), end="")
    if result.failed:
        print(f"{result.failed} cell(s) failed; see error.txt files under {args.out}/cells",
              file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    print(write_report(args.results, args.out), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a colored-digit task as TABD files")
    g.add_argument("--task", choices=["even_odd", "cmnist"], default="even_odd")
    g.add_argument("--n-train", type=int, default=20000)
    g.add_argument("--n-val", type=int, default=2000)
    g.add_argument("--n-test", type=int, default=None)
    g.add_argument("--p", type=float, default=0.99)
    g.add_argument("--idx-images")
    g.add_argument("--idx-labels")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one method on one seed")
    t.add_argument("--config", help="run config (e.g. a grid cell's cell.ini)")
    t.add_argument("--data", help="directory with train/val/test.tabd")
    t.add_argument("--method", choices=["erm", "tab", "jtt", "gdro"], default="erm")
    t.add_argument("--model", choices=["mlp", "cnn6"], default="mlp")
    t.add_argument("--hidden", default="128")
    t.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--weight-decay", type=float, default=0.0)
    t.add_argument("--batch-size", type=int, default=256)
    t.add_argument("--max-epochs", type=int, default=40)
    t.add_argument("--identifier-epochs", type=int, default=5)
    t.add_argument("--upweight", default="ratio")
    t.add_argument("--gamma", type=float, default=0.01)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a TABD file")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--train-data", help="training TABD, for group-weighted accuracy")
    e.add_argument("--out", help="write the per-sample record CSV here")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("grid", help="run a method x candidate x seed grid")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--seed", type=int, default=None, help="unused; seeds come from [grid]")
    r.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="summarize grid results")
    p.add_argument("--results", required=True)
    p.add_argument("--out")
    p.add_argument("--config", help="unused")
    p.add_argument("--seed", type=int, default=None, help="unused")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ReportError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
