"""Seeded grid execution over methods, hyperparameter candidates and seeds.

Grid configs are INI files (``key = value`` lines under ``[section]``
headers, lists comma-separated)::

    [task]
    generator = even_odd      # even_odd | cmnist | tabd
    n_train = 20000
    n_val = 2000
    n_test = 2000
    p = 0.99
    seed = 0

    [model]
    kind = mlp
    hidden = 128

    [train]
    lr = 0.001
    batch_size = 256
    max_epochs = 40

    [grid]
    methods = erm, tab
    seeds = 0, 1, 2
    workers = 1

    [erm]
    weight_decay = 0, 0.0001

Every combination of the values listed in a method's section is one
candidate.  The ``tab`` section must stay empty.
"""
from __future__ import annotations

import configparser
import csv
import io
import itertools
import json
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import baselines, tab
from .dataset import (LabeledDataset, gen_cmnist, gen_even_odd, group_weights,
                      import_idx, read_tabd, write_tabd)
from .history import write_history
from .metrics import EvalRecord, GridResult, GridRow
from .nn import EarlyStop, ModelSpec, Plateau, TrainConfig, save_model

METHODS = ("erm", "tab", "jtt", "gdro")
TRAIN_KEYS = {"optimizer": str, "lr": float, "momentum": float, "weight_decay": float,
              "batch_size": int, "max_epochs": int, "patience": int, "min_delta": float,
              "plateau_factor": float, "plateau_patience": int}
METHOD_KEYS = {"erm": {}, "tab": {},
               "jtt": {"identifier_epochs": int, "upweight": str},
               "gdro": {"gamma": float}}
REQUIRED = {"jtt": ("identifier_epochs", "upweight")}

CELL_COLUMNS = ["method", "candidate_id", "hyperparams", "seed", "status", "val_acc",
                "val_wga", "test_acc", "test_acc_unweighted", "test_wga", "epochs",
                "train_size", "bc_before", "bc_after", "identified", "wall_seconds"]


class ConfigError(ValueError):
    pass


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _parse(text_or_path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    text = Path(text_or_path).read_text() if isinstance(text_or_path, Path) or (
        isinstance(text_or_path, str) and "\n" not in text_or_path and os.path.exists(text_or_path)
    ) else text_or_path
    cp.read_string(text)
    return cp


# --------------------------------------------------------------------------
# Run configuration

@dataclass
class RunConfig:
    task: dict
    model: dict
    train: dict
    method: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    candidate_id: int = 0

    def __post_init__(self):
        check_method_params(self.method, self.params)

    @property
    def hyperparams(self) -> str:
        return ";".join(f"{k}={self.params[k]}" for k in sorted(self.params))

    def model_spec(self, shape, num_classes) -> ModelSpec:
        hidden = tuple(int(h) for h in _split(str(self.model.get("hidden", "128"))))
        return ModelSpec(self.model.get("kind", "mlp"), shape, num_classes, hidden)

    def train_config(self) -> TrainConfig:
        t = {k: TRAIN_KEYS[k](v) for k, v in self.train.items()}
        for k, v in self.params.items():
            if k in TRAIN_KEYS:
                t[k] = TRAIN_KEYS[k](v)
        es = EarlyStop("val_acc", t.pop("patience", 5), t.pop("min_delta", 0.001))
        pl = Plateau(t.pop("plateau_factor", 0.1), t.pop("plateau_patience", 10))
        return TrainConfig(early_stop=es, plateau=pl, **t)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["task"] = {k: str(v) for k, v in self.task.items()}
        cp["model"] = {k: str(v) for k, v in self.model.items()}
        cp["train"] = {k: str(v) for k, v in self.train.items()}
        cp["run"] = {"method": self.method, "seed": str(self.seed),
                     "candidate_id": str(self.candidate_id)}
        cp["params"] = {k: str(v) for k, v in self.params.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text_or_path) -> "RunConfig":
        cp = _parse(text_or_path)
        for sec in ("task", "run"):
            if not cp.has_section(sec):
                raise ConfigError(f"run config lacks a [{sec}] section")
        sec = lambda name: dict(cp[name]) if cp.has_section(name) else {}
        return cls(task=sec("task"), model=sec("model"), train=sec("train"),
                   method=cp["run"]["method"], params=sec("params"),
                   seed=int(cp["run"].get("seed", 0)),
                   candidate_id=int(cp["run"].get("candidate_id", 0)))


def check_method_params(method: str, params: dict) -> None:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    if method == "tab" and params:
        raise ConfigError("tab takes no hyperparameters")
    allowed = set(TRAIN_KEYS) | set(METHOD_KEYS[method])
    unknown = set(params) - allowed
    if unknown:
        raise ConfigError(f"{method}: unknown hyperparameters {sorted(unknown)}")
    missing = [k for k in REQUIRED.get(method, ()) if k not in params]
    if missing:
        raise ConfigError(f"{method}: missing required hyperparameters {missing}")


@dataclass
class GridConfig:
    task: dict
    model: dict
    train: dict
    methods: list
    seeds: list
    candidates: dict  # method -> list of param dicts
    workers: int

    @classmethod
    def parse(cls, text_or_path) -> "GridConfig":
        cp = _parse(text_or_path)
        if not cp.has_section("task"):
            raise ConfigError("grid config lacks a [task] section")
        grid = cp["grid"] if cp.has_section("grid") else {}
        methods = _split(grid.get("methods", "erm"))
        for m in methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        for name in cp.sections():
            if name in ("task", "model", "train", "grid"):
                continue
            if name not in METHODS:
                raise ConfigError(f"unknown section [{name}]")
            if name == "tab" and len(cp[name]):
                raise ConfigError("tab takes no hyperparameters")
        candidates = {}
        for m in methods:
            lists = {k: _split(v) for k, v in cp[m].items()} if cp.has_section(m) else {}
            keys = sorted(lists)
            combos = [dict(zip(keys, vals)) for vals in itertools.product(*(lists[k] for k in keys))]
            for c in combos:
                check_method_params(m, c)
            candidates[m] = combos
        for k in cp["train"] if cp.has_section("train") else ():
            if k not in TRAIN_KEYS:
                raise ConfigError(f"unknown [train] key {k!r}")
        seeds = [int(s) for s in _split(grid.get("seeds", "0"))]
        workers = int(grid.get("workers", os.cpu_count() or 1))
        return cls(dict(cp["task"]), dict(cp["model"]) if cp.has_section("model") else {},
                   dict(cp["train"]) if cp.has_section("train") else {},
                   methods, seeds, candidates, workers)


# --------------------------------------------------------------------------
# Data

def materialize_task(task: dict, out_dir) -> dict:
    """Generate (or locate) the task's TABD files; returns a [task] section
    pointing at them."""
    gen = task.get("generator", "even_odd")
    if gen == "tabd":
        return dict(task)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = None
    if task.get("idx_images"):
        source = import_idx(task["idx_images"], task["idx_labels"])
    fn = {"even_odd": gen_even_odd, "cmnist": gen_cmnist}.get(gen)
    if fn is None:
        raise ConfigError(f"unknown generator {gen!r}")
    n_test = task.get("n_test")
    splits = fn(int(task["n_train"]), int(task["n_val"]), float(task["p"]), int(task.get("seed", 0)),
                source=source, n_test=None if n_test is None else int(n_test))
    paths = {}
    for name, ds in splits.items():
        path = out_dir / f"{name}.tabd"
        write_tabd(ds, path)
        paths[name] = str(path)
    return dict(task, generator="tabd", **paths)


def load_task(task: dict) -> dict[str, LabeledDataset]:
    if task.get("generator") != "tabd":
        raise ConfigError("cells run on materialized (tabd) tasks")
    return {name: read_tabd(task[name]) for name in ("train", "val", "test") if task.get(name)}


# --------------------------------------------------------------------------
# Cells

def execute(run: RunConfig, data: dict[str, LabeledDataset]):
    """Run one method on loaded data; returns (model, test record, val record, info)."""
    tr, val, test = data["train"], data.get("val"), data.get("test")
    spec = run.model_spec(tr.shape, tr.num_classes)
    cfg = run.train_config()
    info = {}
    if run.method == "erm":
        res = baselines.run_erm(tr, val, cfg, run.seed, spec, test)
    elif run.method == "jtt":
        up = run.params["upweight"]
        jcfg = baselines.JttConfig(int(run.params["identifier_epochs"]),
                                   "ratio" if up == "ratio" else int(up))
        res = baselines.run_jtt(tr, val, cfg, jcfg, run.seed, spec, test)
        info["lambda_up"] = res.extras["lambda_up"]
    elif run.method == "gdro":
        res = baselines.run_gdro(tr, val, cfg, run.seed, spec,
                                 gamma=float(run.params.get("gamma", 0.01)), test_ds=test)
    else:
        res = tab.run_tab(tr, val, cfg, run.seed, spec, test)
        info["tab"] = res
        info["train_size"] = res.augmented_size
        return res.model, res.test_record, res.val_record, res.robust, info
    info["train_size"] = res.train_size
    return res.model, res.test_record, res.val_record, res.train, info


def cell_dir(out_dir, run: RunConfig) -> Path:
    return Path(out_dir) / "cells" / run.method / f"c{run.candidate_id}" / f"s{run.seed}"


def run_cell(run: RunConfig, out_dir) -> dict:
    """Execute and persist one (method, candidate, seed) cell."""
    d = cell_dir(out_dir, run)
    d.mkdir(parents=True, exist_ok=True)
    (d / "cell.ini").write_text(run.to_ini())
    row = {"method": run.method, "candidate_id": run.candidate_id,
           "hyperparams": run.hyperparams, "seed": run.seed, "status": "ok"}
    start = time.perf_counter()
    try:
        data = load_task(run.task)
        model, test_rec, val_rec, trained, info = execute(run, data)
        save_model(model, d / "model.tabm")
        weights = group_weights(data["train"], data["test"])
        (d / "eval_test.csv").write_text(test_rec.to_csv())
        (d / "eval_val.csv").write_text(val_rec.to_csv())
        row.update(val_acc=val_rec.mean_acc, val_wga=val_rec.wga,
                   test_acc=test_rec.weighted_mean_acc(weights),
                   test_acc_unweighted=test_rec.mean_acc, test_wga=test_rec.wga,
                   epochs=trained.epochs_run, train_size=info["train_size"])
        if "tab" in info:
            res = info["tab"]
            write_history(res.history, d / "history.tabh")
            res.manifest.save(d / "manifest.json")
            if res.rebalance is not None:
                row.update(bc_before=res.rebalance.bc_fraction_before,
                           bc_after=res.rebalance.bc_fraction_after,
                           identified=res.rebalance.identified_fraction)
    except Exception:
        row["status"] = "failed"
        (d / "error.txt").write_text(traceback.format_exc())
    row["wall_seconds"] = time.perf_counter() - start
    (d / "metrics.json").write_text(json.dumps(row, indent=1, sort_keys=True))
    return row


def rerun_cell(cell_path) -> EvalRecord:
    """Re-execute a persisted cell from its cell.ini; returns its test record."""
    run = RunConfig.from_ini(Path(cell_path) / "cell.ini")
    _, test_rec, _, _, _ = execute(run, load_task(run.task))
    return test_rec


def _run_cell_args(args):
    return run_cell(*args)


def write_cells_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, CELL_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in r.items() if k in CELL_COLUMNS})


def read_cells_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        for k in CELL_COLUMNS:
            v = r.get(k, "")
            if k in ("candidate_id", "seed", "epochs", "train_size") and v != "":
                r[k] = int(v)
            elif k not in ("method", "hyperparams", "status") and v != "":
                r[k] = float(v)
    return rows


def aggregate(rows: list[dict]) -> GridResult:
    """Mean over seeds of every successful (method, candidate)."""
    out = []
    keyed = {}
    for r in rows:
        if r["status"] == "ok":
            keyed.setdefault((r["method"], r["candidate_id"]), []).append(r)
    for (method, cid), rs in sorted(keyed.items(), key=lambda kv: (METHODS.index(kv[0][0]), kv[0][1])):
        mean = lambda k: float(np.mean([r[k] for r in rs]))
        out.append(GridRow(method, cid, rs[0]["hyperparams"], len(rs), mean("val_acc"),
                           mean("val_wga"), mean("test_wga"), mean("test_acc")))
    return GridResult(out)


@dataclass
class GridRun:
    grid: Optional[GridResult]
    cells: list
    failed: int


def run_grid(config, out_dir, workers: Optional[int] = None) -> GridRun:
    """Run every (method, candidate, seed) cell and write cells.csv and grid.csv."""
    cfg = config if isinstance(config, GridConfig) else GridConfig.parse(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = materialize_task(cfg.task, out / "data")
    cp = configparser.ConfigParser()
    cp["task"] = {k: str(v) for k, v in cfg.task.items()}
    with open(out / "grid.ini", "w") as f:
        cp.write(f)

    runs = [RunConfig(task, cfg.model, cfg.train, m, cand, seed, cid)
            for m in cfg.methods
            for cid, cand in enumerate(cfg.candidates[m])
            for seed in cfg.seeds]
    n_workers = max(1, workers if workers is not None else cfg.workers)
    if n_workers == 1:
        rows = [run_cell(r, out) for r in runs]
    else:
        with ProcessPoolExecutor(n_workers) as pool:
            rows = list(pool.map(_run_cell_args, [(r, out) for r in runs]))
    write_cells_csv(rows, out / "cells.csv")
    failed = sum(r["status"] != "ok" for r in rows)
    grid = None
    if failed < len(rows):
        grid = aggregate(rows)
        (out / "grid.csv").write_text(grid.to_csv())
    return GridRun(grid, rows, failed)
