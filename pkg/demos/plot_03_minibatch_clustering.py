"""
Exact and mini-batch two-cluster k-means
========================================

The clustering step only needs two clusters per class.  For large classes the
mini-batch variant trades a few assignments for speed.
"""

import time

import numpy as np

from tabkit import kmeans2, minibatch_kmeans2

rng = np.random.default_rng(0)
# a loss-history-like set: many low, fast-falling curves and a few slow ones
T = 20
epochs = np.arange(T)
easy = np.exp(-epochs / 2) * rng.uniform(0.5, 1.5, (9000, 1))
hard = np.exp(-epochs / 12) * rng.uniform(1.0, 2.0, (300, 1))
points = np.concatenate([easy, hard]) + rng.normal(0, 0.02, (9300, T))

t0 = time.perf_counter()
exact = kmeans2(points, seed=0)
t1 = time.perf_counter()
mini = minibatch_kmeans2(points, batch_size=256, seed=0, reassignment_ratio=1e-5)
t2 = time.perf_counter()

agree = max(np.mean(exact.assignment == mini.assignment),
            np.mean(exact.assignment != mini.assignment))
print(f"exact:      sizes {sorted(exact.sizes().tolist())}, inertia {exact.inertia:.1f}, "
      f"{t1 - t0:.2f}s")
print(f"mini-batch: sizes {sorted(mini.sizes().tolist())}, inertia {mini.inertia:.1f}, "
      f"{t2 - t1:.2f}s")
print(f"assignment agreement {agree:.2%}")

# the smaller cluster should be the slow-falling curves
small = np.argmin(exact.sizes())
print("slow curves in the smaller cluster:",
      int((exact.assignment[9000:] == small).sum()), "of 300")
