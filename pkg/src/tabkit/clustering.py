"""Two-cluster k-means: exact Lloyd iterations and a mini-batch variant."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Clustering:
    assignment: np.ndarray  # (M,) in {0, 1}
    centroids: np.ndarray  # (2, T)
    inertia: float
    iterations_run: int
    traces: list = field(default_factory=list, repr=False)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=2)


def _as_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"points must be a non-empty (M, T) array, got shape {x.shape}")
    return x


def _sq_dists(x, centers):
    return np.stack([((x - c) ** 2).sum(axis=1) for c in centers], axis=1)


def sse(points, assignment, centroids) -> float:
    x = _as_points(points)
    return float(((x - centroids[assignment]) ** 2).sum())


def _kmeanspp(x, rng):
    first = rng.integers(len(x))
    d2 = ((x - x[first]) ** 2).sum(axis=1)
    total = d2.sum()
    second = rng.integers(len(x)) if total <= 0 else rng.choice(len(x), p=d2 / total)
    return np.stack([x[first], x[second]]).copy()


def _means(x, assign, centers):
    out = centers.copy()
    for c in (0, 1):
        m = assign == c
        if m.any():
            out[c] = x[m].mean(axis=0)
    return out


def _lloyd(x, centers, max_iter):
    prev = None
    trace = []
    for it in range(max_iter):
        d = _sq_dists(x, centers)
        assign = d.argmin(axis=1)
        counts = np.bincount(assign, minlength=2)
        if len(x) > 1 and counts.min() == 0:
            # Empty cluster: hand it the point farthest from its centroid.
            empty = int(counts.argmin())
            far = int(d[np.arange(len(x)), assign].argmax())
            assign[far] = empty
        centers = _means(x, assign, centers)
        trace.append(float(((x - centers[assign]) ** 2).sum()))
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign
    return assign, centers, trace, it + 1


def kmeans2(points, seed: int = 0, restarts: int = 10, max_iter: int = 300) -> Clustering:
    """Best of ``restarts`` k-means++-seeded Lloyd runs (k = 2).

    Each run iterates until the assignment stops changing or ``max_iter``
    iterations.  ``traces`` holds the per-iteration inertia of every run.
    """
    x = _as_points(points)
    rng = np.random.default_rng(seed)
    best = None
    traces = []
    for _ in range(restarts):
        assign, centers, trace, iters = _lloyd(x, _kmeanspp(x, rng), max_iter)
        traces.append(trace)
        inertia = trace[-1]
        if best is None or inertia < best.inertia:
            best = Clustering(assign, centers, inertia, iters)
    best.traces = traces
    return best


def minibatch_kmeans2(points, batch_size: int, seed: int = 0,
                      reassignment_ratio: float = 1e-5, max_iters: int = 100,
                      max_no_improvement: int = 10) -> Clustering:
    """Mini-batch k-means (k = 2) with per-centroid 1/count learning rates.

    ``max_iters`` counts passes over the data, so at most
    ``max_iters * ceil(M / batch_size)`` mini-batch steps are taken; runs stop
    earlier once the smoothed batch inertia has not improved for
    ``max_no_improvement`` steps.  After every step, centroids holding less
    than ``reassignment_ratio`` of the accumulated mass are re-seeded at random
    data points.  A final pass over all points yields the assignment.
    """
    x = _as_points(points)
    m = len(x)
    if not 1 <= batch_size <= m:
        raise ValueError(f"batch_size must lie in [1, {m}]")
    rng = np.random.default_rng(seed)
    init_idx = rng.choice(m, min(m, 3 * batch_size), replace=False)
    centers = _kmeanspp(x[init_idx], rng)
    counts = np.zeros(2)
    steps = max_iters * -(-m // batch_size)
    alpha = min(1.0, 2.0 * batch_size / (m + 1))
    ewa, best_ewa, stale = None, np.inf, 0
    step = 0
    for step in range(1, steps + 1):
        xb = x[rng.choice(m, batch_size, replace=False)]
        d = _sq_dists(xb, centers)
        a = d.argmin(axis=1)
        batch_inertia = d[np.arange(batch_size), a].mean()
        for c in (0, 1):
            sel = a == c
            nc = sel.sum()
            if nc:
                counts[c] += nc
                centers[c] += (xb[sel].sum(axis=0) - nc * centers[c]) / counts[c]
        low = counts < reassignment_ratio * counts.sum()
        if low.any():
            centers[low] = x[rng.choice(m, int(low.sum()), replace=False)]
            counts[low] = counts[~low].min() if (~low).any() else 0.0

        ewa = batch_inertia if ewa is None else (1 - alpha) * ewa + alpha * batch_inertia
        if ewa < best_ewa:
            best_ewa, stale = ewa, 0
        else:
            stale += 1
            if stale >= max_no_improvement:
                break

    assign = _sq_dists(x, centers).argmin(axis=1)
    inertia = float(((x - centers[assign]) ** 2).sum())
    return Clustering(assign, centers, inertia, step)
