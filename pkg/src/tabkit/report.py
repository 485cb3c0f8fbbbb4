"""Summary tables from grid result directories."""
from __future__ import annotations

import configparser
import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .grid import METHODS, read_cells_csv
from .metrics import GridResult, MetricsError, mms, pou, pou_unfiltered


class ReportError(ValueError):
    pass


@dataclass
class ReportRow:
    task: str
    p: str
    method: str
    candidate_id: int
    hyperparams: str
    seeds: int
    wga_mean: float
    wga_std: float
    acc_mean: float
    acc_std: float
    pou: float
    pou_unfiltered: float
    mms: float
    bc_before: Optional[float]
    bc_after: Optional[float]
    identified: Optional[float]
    wall_seconds: float


REPORT_COLUMNS = list(ReportRow.__dataclass_fields__)


def _task_info(run_dir: Path) -> tuple[str, str]:
    ini = run_dir / "grid.ini"
    if not ini.exists():
        return "", ""
    cp = configparser.ConfigParser()
    cp.read(ini)
    t = cp["task"] if cp.has_section("task") else {}
    return t.get("generator", ""), t.get("p", "")


def summarize_run(run_dir) -> list[ReportRow]:
    run_dir = Path(run_dir)
    try:
        grid = GridResult.from_csv((run_dir / "grid.csv").read_text())
        cells = read_cells_csv(run_dir / "cells.csv")
    except (OSError, MetricsError, KeyError, ValueError) as e:
        raise ReportError(f"{run_dir}: missing or corrupt results ({e})") from e
    task, p = _task_info(run_dir)
    rows = []
    for method in METHODS:
        mgrid = [r for r in grid.rows if r.method == method]
        if not mgrid:
            continue
        sub = GridResult(mgrid)
        chosen = sub.select("val_wga_mean" if method == "gdro" else "val_acc_mean")
        ok = [c for c in cells if c["method"] == method and c["status"] == "ok"]
        sel = [c for c in ok if c["candidate_id"] == chosen.candidate_id]
        wga = np.array([c["test_wga"] for c in sel])
        acc = np.array([c["test_acc"] for c in sel])
        try:
            p_f, p_u = pou(sub), pou_unfiltered(sub)
        except MetricsError:
            p_f, p_u = float("nan"), pou_unfiltered(sub)
        stat = lambda k: (float(np.mean([c[k] for c in sel]))
                          if sel and all(c.get(k, "") != "" for c in sel) else None)
        rows.append(ReportRow(
            task, p, method, chosen.candidate_id, chosen.hyperparams, len(sel),
            float(wga.mean()), float(wga.std()), float(acc.mean()), float(acc.std()),
            p_f, p_u, mms(sub), stat("bc_before"), stat("bc_after"), stat("identified"),
            float(sum(c["wall_seconds"] for c in cells if c["method"] == method))))
    return rows


def find_runs(results_dir) -> list[Path]:
    root = Path(results_dir)
    runs = sorted({p.parent for p in root.rglob("grid.csv")})
    if not runs:
        raise ReportError(f"no grid.csv under {root}")
    return runs


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def report(results_dir) -> tuple[list[ReportRow], str, str]:
    """Rows, a text table and CSV text for every grid run under ``results_dir``."""
    rows = [r for run in find_runs(results_dir) for r in summarize_run(run)]
    csv_buf = io.StringIO()
    w = csv.writer(csv_buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, k)) for k in REPORT_COLUMNS])

    lines = [f"{'task':<9} {'p':<6} {'method':<6} {'WGA (%)':>15} {'mean acc (%)':>15} "
             f"{'PoU':>7} {'MMS (%)':>8} {'seeds':>5}"]
    for r in rows:
        lines.append(
            f"{r.task:<9} {r.p:<6} {r.method:<6} "
            f"{100 * r.wga_mean:>7.2f} ± {100 * r.wga_std:<5.2f} "
            f"{100 * r.acc_mean:>7.2f} ± {100 * r.acc_std:<5.2f} "
            f"{r.pou:>7.4f} {100 * r.mms:>8.2f} {r.seeds:>5}")
    tab_rows = [r for r in rows if r.method == "tab" and r.bc_before is not None]
    if tab_rows:
        lines += ["", f"{'task':<9} {'p':<6} {'BC before (%)':>14} {'BC after (%)':>13} "
                      f"{'identified (%)':>15}"]
        for r in tab_rows:
            lines.append(f"{r.task:<9} {r.p:<6} {100 * r.bc_before:>14.2f} "
                         f"{100 * r.bc_after:>13.2f} {100 * r.identified:>15.2f}")
    return rows, "\n".join(lines) + "\n", csv_buf.getvalue()


def sweep_csv(rows: list[ReportRow]) -> str:
    """Plot-ready accuracy/WGA against correlation strength, per method."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "p", "method", "acc_mean", "acc_std", "wga_mean", "wga_std"])
    for r in sorted(rows, key=lambda r: (r.task, r.p, METHODS.index(r.method))):
        w.writerow([r.task, r.p, r.method, _fmt(r.acc_mean), _fmt(r.acc_std),
                    _fmt(r.wga_mean), _fmt(r.wga_std)])
    return buf.getvalue()


def write_report(results_dir, out_dir=None) -> str:
    rows, text, table_csv = report(results_dir)
    out = Path(out_dir or results_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(table_csv)
    (out / "sweep.csv").write_text(sweep_csv(rows))
    return text
