"""
Random transforms for duplicated samples
========================================

Duplicates can optionally pass through a seeded rotation, shift and 5x5
Gaussian blur so the rebalanced set is not made of exact copies.
"""

import numpy as np

from tabkit.dataset import gen_even_odd
from tabkit.tab import AugmentationManifest, ManifestEntry, apply_manifest, eta_transform

ds = gen_even_odd(8, 8, p=0.5, seed=3)["train"]
img = ds.features[0]

# every seed gives a different, reproducible image
a, b = eta_transform(img, seed=1), eta_transform(img, seed=2)
print("seed 1 vs seed 2 differ:", not np.array_equal(a, b))
print("same seed replays:", np.array_equal(a, eta_transform(img, seed=1)))

# the blur alone spreads a point over a 5x5 patch and keeps its mass
dot = np.zeros((1, 11, 11), np.float32)
dot[0, 5, 5] = 1.0
blurred = eta_transform(dot, seed=0, max_angle=0, max_shift=0)
print(np.round(blurred[0, 3:8, 3:8], 3))

# applied through a manifest: three transformed copies of sample 0
m = AugmentationManifest([ManifestEntry(index=0, copies=3, transform_seed=42)], [])
out = apply_manifest(ds, m, transform=eta_transform)
print("dataset size", len(ds), "->", len(out), "labels of copies", out.labels[-3:].tolist())


def sketch(im):
    ramp = " .:-=+*#%@"
    g = im.max(0)
    return "\n".join("".join(ramp[int(v * 9.99)] for v in row) for row in g[::2])


print(sketch(out.features[0]))
print(sketch(out.features[-1]))
