"""Group-aware evaluation and model-selection cost scores."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields
from typing import Iterable, Optional, Sequence

import numpy as np

from .dataset import GroupWeights


class MetricsError(ValueError):
    pass


@dataclass
class EvalRecord:
    predictions: np.ndarray
    labels: np.ndarray
    groups: Optional[np.ndarray]
    num_groups: int

    def __post_init__(self):
        self.predictions = np.asarray(self.predictions, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=np.int64)
        if len(self.predictions) != len(self.labels):
            raise MetricsError("predictions and labels differ in length")

    @property
    def correct(self) -> np.ndarray:
        return self.predictions == self.labels

    def group_acc(self) -> np.ndarray:
        """Accuracy per group id; NaN for groups with no samples."""
        if self.groups is None:
            raise MetricsError("record has no group labels")
        n = np.bincount(self.groups, minlength=self.num_groups).astype(float)
        hit = np.bincount(self.groups, weights=self.correct, minlength=self.num_groups)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, hit / n, np.nan)

    @property
    def mean_acc(self) -> float:
        return float(self.correct.mean())

    @property
    def wga(self) -> float:
        return wga(self)

    def weighted_mean_acc(self, weights: GroupWeights) -> float:
        return weighted_mean_acc(self, weights)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "label", "group", "prediction"])
        groups = self.groups if self.groups is not None else [-1] * len(self.labels)
        for i, (y, g, p) in enumerate(zip(self.labels, groups, self.predictions)):
            w.writerow([i, int(y), int(g), int(p)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, num_groups: int) -> "EvalRecord":
        rows = list(csv.DictReader(io.StringIO(text)))
        labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
        groups = np.array([int(r["group"]) for r in rows], dtype=np.int64)
        preds = np.array([int(r["prediction"]) for r in rows], dtype=np.int64)
        return cls(preds, labels, None if (groups < 0).all() and len(rows) else groups, num_groups)


def wga(record: EvalRecord) -> float:
    """Minimum accuracy over the groups present in the record."""
    acc = record.group_acc()
    if np.isnan(acc).all():
        raise MetricsError("no non-empty group")
    return float(np.nanmin(acc))


def weighted_mean_acc(record: EvalRecord, weights: GroupWeights) -> float:
    if record.groups is None:
        raise MetricsError("record has no group labels")
    w = np.asarray(weights.weights, dtype=float)
    if record.groups.max(initial=-1) >= len(w):
        raise MetricsError("missing weight for a present group")
    sw = w[record.groups]
    if sw.sum() <= 0:
        raise MetricsError("sample weights sum to zero")
    return float((sw * record.correct).sum() / sw.sum())


# --------------------------------------------------------------------------
# Model-selection scores

@dataclass
class GridRow:
    method: str
    candidate_id: int
    hyperparams: str
    seed_count: int
    val_acc_mean: float
    val_wga_mean: float
    test_wga_mean: float
    test_acc_mean: float


GRID_COLUMNS = [f.name for f in fields(GridRow)]


@dataclass
class GridResult:
    rows: list

    def __post_init__(self):
        if not self.rows:
            raise MetricsError("empty grid")

    def __len__(self):
        return len(self.rows)

    def for_method(self, method: str) -> "GridResult":
        return GridResult([r for r in self.rows if r.method == method])

    def select(self, by: str = "val_acc_mean") -> GridRow:
        """Row with the highest ``by`` score; ties go to the first listed."""
        best = self.rows[0]
        for r in self.rows[1:]:
            if getattr(r, by) > getattr(best, by):
                best = r
        return best

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for r in self.rows:
            w.writerow([r.method, r.candidate_id, r.hyperparams, r.seed_count,
                        repr(float(r.val_acc_mean)), repr(float(r.val_wga_mean)),
                        repr(float(r.test_wga_mean)), repr(float(r.test_acc_mean))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GridResult":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames != GRID_COLUMNS:
            raise MetricsError(f"unexpected grid CSV columns {reader.fieldnames}")
        rows = []
        for r in reader:
            rows.append(GridRow(r["method"], int(r["candidate_id"]), r["hyperparams"],
                                int(r["seed_count"]), float(r["val_acc_mean"]),
                                float(r["val_wga_mean"]), float(r["test_wga_mean"]),
                                float(r["test_acc_mean"])))
        return cls(rows)


def _ratio(num: float, den: float) -> float:
    if den > 0:
        return num / den
    return float("inf") if num > 0 else 1.0


def pou(grid: GridResult) -> float:
    """Price of unawareness over candidates with non-zero validation WGA.

    Best test WGA among the kept candidates divided by the test WGA of the
    kept candidate with the highest mean validation accuracy (first listed on
    ties).  A selected candidate with zero test WGA gives ``inf``.
    """
    kept = [r for r in grid.rows if r.val_wga_mean > 0]
    if not kept:
        raise MetricsError("no candidate with nonzero validation WGA")
    chosen = GridResult(kept).select("val_acc_mean")
    return _ratio(max(r.test_wga_mean for r in kept), chosen.test_wga_mean)


def pou_unfiltered(grid: GridResult) -> float:
    """The same ratio taken over every candidate, for transparency."""
    chosen = grid.select("val_acc_mean")
    return _ratio(max(r.test_wga_mean for r in grid.rows), chosen.test_wga_mean)


def mms(grid: GridResult) -> float:
    """Mean test WGA over all candidates."""
    return float(np.mean([r.test_wga_mean for r in grid.rows]))


# --------------------------------------------------------------------------
# Rebalancing statistics

@dataclass
class RebalanceStats:
    bc_fraction_before: float
    bc_fraction_after: float
    identified_fraction: float

    @property
    def gain(self) -> float:
        return _ratio(self.bc_fraction_after, self.bc_fraction_before)


def rebalance_stats(manifest, train_groups, bias_conflicting: Iterable[int],
                    minority_indices: Optional[Sequence[int]] = None,
                    num_groups: Optional[int] = None) -> RebalanceStats:
    """Share of bias-conflicting samples before and after augmentation.

    ``minority_indices`` (the union of the per-class minority clusters) gives
    ``identified_fraction``: the share of true bias-conflicting training
    samples that landed in a minority cluster.  Without it, the indices
    selected by the manifest are used.
    """
    groups = np.asarray(train_groups, dtype=np.int64)
    bc_set = np.array(sorted(set(bias_conflicting)), dtype=np.int64)
    if num_groups is not None and (
            (groups >= num_groups).any() or (bc_set >= num_groups).any() or (groups < 0).any()):
        raise MetricsError("unknown group ids")
    is_bc = np.isin(groups, bc_set)
    n, n_bc = len(groups), int(is_bc.sum())
    extra = extra_bc = 0
    for e in manifest.entries:
        extra += e.copies
        extra_bc += e.copies * int(is_bc[e.index])
    before = n_bc / n if n else 0.0
    after = (n_bc + extra_bc) / (n + extra) if n + extra else 0.0
    if minority_indices is None:
        minority_indices = [e.index for e in manifest.entries]
    found = np.zeros(n, dtype=bool)
    found[np.asarray(minority_indices, dtype=np.int64)] = True
    identified = float((found & is_bc).sum() / n_bc) if n_bc else 0.0
    return RebalanceStats(before, after, identified)
