"""Synthetic spurious-correlation datasets and group bookkeeping.

Two colored-digit tasks are provided:

* Even-Odd: binary parity of a digit, spuriously correlated with a red/green
  coloring (odd -> red, even -> green).
* cMNIST: ten-way digit identity, spuriously correlated with one of ten fixed
  RGB colors.

Digits come either from real IDX files (:func:`import_idx`) or from a
procedural glyph renderer that needs no downloads.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

TABD_MAGIC = b"TABD"
TABD_VERSION = 1
NO_GROUP = 0xFFFFFFFF

SPLITS = ("train", "val", "test")

# Palette for cMNIST; fixed across every call so splits share colors.
PALETTE_SEED = 20240917


class DatasetError(ValueError):
    pass


@dataclass
class RawDigits:
    """Grayscale digits in [0, 1] with their 0-9 identities."""

    pixels: np.ndarray  # (N, H, W) float32
    labels: np.ndarray  # (N,) int64

    def __len__(self):
        return len(self.labels)


@dataclass
class LabeledDataset:
    """Features, labels and (optionally) group ids for one split.

    ``base`` holds the stored feature tensors; ``rows`` optionally maps each
    dataset position to a row of ``base``, which lets duplicated samples share
    storage with their source.  ``labels`` and ``groups`` are always given per
    dataset position.
    """

    base: np.ndarray
    labels: np.ndarray
    groups: Optional[np.ndarray]
    num_classes: int
    num_groups: int
    split: str = "train"
    meta: dict = field(default_factory=dict)
    rows: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=np.int64)
        n = len(self.labels)
        stored = len(self.base) if self.rows is None else len(self.rows)
        if stored != n:
            raise DatasetError(f"{stored} feature rows for {n} labels")
        if self.groups is not None and len(self.groups) != n:
            raise DatasetError("groups and labels differ in length")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        if self.groups is not None and n and (
            self.groups.min() < 0 or self.groups.max() >= self.num_groups
        ):
            raise DatasetError(f"groups must lie in [0, {self.num_groups})")
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split tag {self.split!r}")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return tuple(self.base.shape[1:])

    @property
    def source_index(self) -> np.ndarray:
        """Row of ``base`` backing each dataset position."""
        if self.rows is None:
            return np.arange(len(self))
        return self.rows

    @property
    def features(self) -> np.ndarray:
        if self.rows is None:
            return self.base
        return self.base[self.rows]

    def take(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        if self.rows is None:
            return self.base[idx]
        return self.base[self.rows[idx]]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            rows=self.source_index[idx],
            labels=self.labels[idx],
            groups=None if self.groups is None else self.groups[idx],
        )

    def materialize(self) -> "LabeledDataset":
        if self.rows is None:
            return self
        return replace(self, base=self.base[self.rows], rows=None)

    def group_counts(self) -> np.ndarray:
        if self.groups is None:
            raise DatasetError("dataset carries no group labels")
        return np.bincount(self.groups, minlength=self.num_groups)


# --------------------------------------------------------------------------
# Procedural digits

def _arc(cx, cy, rx, ry, start, stop, n=9):
    t = np.linspace(np.radians(start), np.radians(stop), n)
    return [(cx + rx * np.cos(a), cy + ry * np.sin(a)) for a in t]


# Stroke skeletons in a unit box, x right and y down.  Each digit is a list of
# polylines.
_SKELETONS = {
    0: [_arc(0.5, 0.5, 0.27, 0.38, 0, 360, 17)],
    1: [[(0.36, 0.28), (0.52, 0.12), (0.52, 0.88)], [(0.36, 0.88), (0.68, 0.88)]],
    2: [_arc(0.5, 0.33, 0.24, 0.21, 200, 380, 9)
        + [(0.70, 0.45), (0.26, 0.88), (0.76, 0.88)]],
    3: [_arc(0.47, 0.31, 0.23, 0.19, 210, 450, 10),
        _arc(0.47, 0.69, 0.26, 0.19, 270, 510, 10)],
    4: [[(0.62, 0.88), (0.62, 0.12), (0.22, 0.64), (0.80, 0.64)]],
    5: [[(0.74, 0.12), (0.32, 0.12), (0.29, 0.46)]
        + _arc(0.48, 0.65, 0.25, 0.23, 230, 500, 11)],
    6: [[(0.70, 0.14), (0.42, 0.30), (0.26, 0.58)]
        + _arc(0.50, 0.66, 0.24, 0.22, 180, 540, 15)],
    7: [[(0.24, 0.12), (0.78, 0.12), (0.42, 0.88)], [(0.40, 0.50), (0.68, 0.50)]],
    8: [_arc(0.50, 0.30, 0.20, 0.18, 0, 360, 13),
        _arc(0.50, 0.69, 0.25, 0.20, 0, 360, 13)],
    9: [_arc(0.50, 0.34, 0.23, 0.22, 0, 360, 13),
        [(0.73, 0.34), (0.66, 0.62), (0.42, 0.88)]],
}

# Fixed seed for the per-template perturbation so every dataset sees the same
# ten glyph templates.
TEMPLATE_SEED = 1729


def _segments(skeleton) -> np.ndarray:
    segs = []
    for line in skeleton:
        pts = np.asarray(line, dtype=np.float64)
        segs.append(np.stack([pts[:-1], pts[1:]], axis=1))
    return np.concatenate(segs)  # (S, 2, 2)


def glyph_templates() -> list[np.ndarray]:
    """The ten digit templates as segment arrays in unit coordinates."""
    rng = np.random.default_rng(TEMPLATE_SEED)
    out = []
    for d in range(10):
        segs = _segments(_SKELETONS[d])
        out.append(segs + rng.normal(0.0, 0.01, segs.shape))
    return out


def _render(segs: np.ndarray, thickness: np.ndarray, size: int) -> np.ndarray:
    """Rasterize a batch of segment sets (n, S, 2, 2) in pixel units."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    gx, gy = xs.ravel(), ys.ravel()
    segs = segs.astype(np.float32)
    ax, ay = segs[:, :, 0, 0, None], segs[:, :, 0, 1, None]  # (n, S, 1)
    abx = segs[:, :, 1, 0, None] - ax
    aby = segs[:, :, 1, 1, None] - ay
    denom = np.maximum(abx * abx + aby * aby, 1e-12)
    apx = gx - ax  # (n, S, P)
    apy = gy - ay
    t = np.clip((apx * abx + apy * aby) / denom, 0.0, 1.0)
    apx -= t * abx
    apy -= t * aby
    dist = np.sqrt((apx * apx + apy * apy).min(axis=1))  # (n, P)
    ink = np.clip(thickness[:, None] - dist + 0.5, 0.0, 1.0)
    return ink.reshape(len(segs), size, size)


def render_digits(digits: Sequence[int], rng: np.random.Generator, size: int = 28,
                  chunk: int = 1024) -> np.ndarray:
    """Render handwritten-looking digits with per-sample deformation.

    Each sample gets a random affine warp (rotation, anisotropic scale, shear,
    translation), independent jitter of every stroke vertex, a random stroke
    width, and additive pixel noise.
    """
    digits = np.asarray(digits, dtype=np.int64)
    templates = glyph_templates()
    out = np.empty((len(digits), size, size), dtype=np.float32)
    for lo in range(0, len(digits), chunk):
        block = digits[lo:lo + chunk]
        n = len(block)
        nseg = max(len(templates[d]) for d in block) if n else 0
        segs = np.empty((n, nseg, 2, 2))
        for j, d in enumerate(block):
            s = templates[d]
            segs[j, :len(s)] = s
            segs[j, len(s):] = s[-1]  # pad by repeating the last segment
        segs = segs - 0.5
        segs = segs + rng.normal(0.0, 0.035, segs.shape)
        ang = rng.uniform(-0.35, 0.35, n)
        shear = rng.uniform(-0.3, 0.3, n)
        sx = rng.uniform(0.75, 1.05, n)
        sy = rng.uniform(0.80, 1.05, n)
        cos, sin = np.cos(ang), np.sin(ang)
        m = np.empty((n, 2, 2))
        m[:, 0, 0] = sx * cos
        m[:, 0, 1] = sx * (shear * cos - sin)
        m[:, 1, 0] = sy * sin
        m[:, 1, 1] = sy * (shear * sin + cos)
        segs = np.einsum("nij,nsej->nsei", m, segs)
        shift = rng.uniform(-0.07, 0.07, (n, 1, 1, 2))
        segs = (segs + 0.5 + shift) * (size - 8) + 4
        thickness = rng.uniform(0.9, 2.0, n)
        img = _render(segs, thickness, size)
        img += rng.normal(0.0, 0.05, img.shape)
        out[lo:lo + n] = np.clip(img, 0.0, 1.0)
    return out


# --------------------------------------------------------------------------
# IDX import

def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    data = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DatasetError(f"{path}: file shorter than IDX header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise DatasetError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, data[4:header])
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise DatasetError(f"{path}: truncated payload ({len(data) - header} of {size} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def import_idx(images_path, labels_path) -> RawDigits:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DatasetError(f"image/label count mismatch: {len(images)} vs {len(labels)}")
    return RawDigits(pixels=images.astype(np.float32) / 255.0, labels=labels.astype(np.int64))


def write_idx(pixels_u8: np.ndarray, labels_u8: np.ndarray, images_path, labels_path):
    """Write uint8 images (N, H, W) and labels (N,) as IDX files."""
    pixels_u8 = np.asarray(pixels_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *pixels_u8.shape))
        f.write(pixels_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels_u8)))
        f.write(labels_u8.tobytes())


# --------------------------------------------------------------------------
# Generators

class _DigitSource:
    """Hands out digit images of a requested identity, procedural or pooled."""

    def __init__(self, raw: Optional[RawDigits], rng: np.random.Generator):
        self.rng = rng
        self.raw = raw
        if raw is not None:
            present = set(np.unique(raw.labels).tolist())
            if present != set(range(10)):
                raise DatasetError("digit source must contain all 10 digit classes")
            order = rng.permutation(len(raw))
            self.pools = {d: list(order[raw.labels[order] == d]) for d in range(10)}

    def draw_identities(self, n: int) -> np.ndarray:
        if self.raw is None:
            return self.rng.integers(0, 10, n)
        avail = sum(len(p) for p in self.pools.values())
        if n > avail:
            raise DatasetError(f"requested {n} samples but only {avail} digits remain")
        # Preserve the source's natural digit frequencies by drawing from the
        # merged remaining pool.
        merged = np.concatenate([np.array(self.pools[d], dtype=np.int64) for d in range(10)])
        pick = self.rng.choice(len(merged), n, replace=False)
        return self.raw.labels[merged[pick]]

    def images(self, digits: np.ndarray) -> np.ndarray:
        if self.raw is None:
            return render_digits(digits, self.rng)
        out = np.empty((len(digits),) + self.raw.pixels.shape[1:], dtype=np.float32)
        for i, d in enumerate(digits):
            if not self.pools[d]:
                raise DatasetError(f"digit source exhausted for digit {d}")
            out[i] = self.raw.pixels[self.pools[d].pop()]
        return out


def _colorize(gray: np.ndarray, colors: np.ndarray, attr: np.ndarray) -> np.ndarray:
    return (gray[:, None, :, :] * colors[attr][:, :, None, None]).astype(np.float32)


def _aligned_mask(labels: np.ndarray, p: float, num_classes: int, rng) -> np.ndarray:
    """Exactly round(p * class_size) aligned samples per class."""
    aligned = np.zeros(len(labels), dtype=bool)
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        k = int(round(p * len(idx)))
        aligned[rng.permutation(idx)[:k]] = True
    return aligned


def _check_p(p):
    if not 0.5 <= p <= 1.0:
        raise DatasetError(f"correlation strength p={p} outside [0.5, 1]")


def _generate(task: str, n_train, n_val, p, seed, source, n_test, test_source):
    _check_p(p)
    if task == "even_odd":
        num_classes, num_attrs = 2, 2
        colors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        label_of = lambda d: (d % 2 == 0).astype(np.int64)  # odd -> 0, even -> 1
        digits_of = {0: np.array([1, 3, 5, 7, 9]), 1: np.array([0, 2, 4, 6, 8])}
    elif task == "cmnist":
        num_classes, num_attrs = 10, 10
        colors = cmnist_palette()
        label_of = lambda d: d.astype(np.int64)
        digits_of = {c: np.array([c]) for c in range(10)}
    else:
        raise DatasetError(f"unknown task {task!r}")
    num_groups = num_classes * num_attrs
    n_test = n_val if n_test is None else n_test

    ss = np.random.SeedSequence(seed)
    s_train, s_test = ss.spawn(2)
    rng = np.random.default_rng(s_train)
    digits = _DigitSource(source, rng)
    meta_base = {"generator": task, "p": p, "seed": seed, "colors": colors.tolist()}

    out = {}
    for split, n in (("train", n_train), ("val", n_val)):
        ident = digits.draw_identities(n)
        labels = label_of(ident)
        aligned = _aligned_mask(labels, p, num_classes, rng)
        attr = labels.copy()
        other = rng.integers(1, num_attrs, n)  # uniform over the other attributes
        attr[~aligned] = (labels[~aligned] + other[~aligned]) % num_attrs
        gray = digits.images(ident)
        out[split] = LabeledDataset(
            base=_colorize(gray, colors, attr), labels=labels,
            groups=labels * num_attrs + attr, num_classes=num_classes,
            num_groups=num_groups, split=split, meta=dict(meta_base, split=split),
        )

    # Group-balanced test split: n_test // k samples for every (label, color).
    trng = np.random.default_rng(s_test)
    tdigits = digits if test_source is None else _DigitSource(test_source, trng)
    per_group = n_test // num_groups
    groups = np.repeat(np.arange(num_groups), per_group)
    labels = groups // num_attrs
    attr = groups % num_attrs
    ident = np.empty(len(groups), dtype=np.int64)
    for c in range(num_classes):
        m = labels == c
        if tdigits.raw is None:
            ident[m] = trng.choice(digits_of[c], m.sum())
        else:
            pool = np.concatenate([[d] * len(tdigits.pools[d]) for d in digits_of[c]])
            if len(pool) < m.sum():
                raise DatasetError(f"not enough source digits for test class {c}")
            ident[m] = trng.choice(pool, m.sum(), replace=False)
    gray = tdigits.images(ident)
    out["test"] = LabeledDataset(
        base=_colorize(gray, colors, attr), labels=labels, groups=groups,
        num_classes=num_classes, num_groups=num_groups, split="test",
        meta=dict(meta_base, split="test"),
    )
    return out


def gen_even_odd(n_train: int, n_val: int, p: float, seed: int,
                 source: Optional[RawDigits] = None, n_test: Optional[int] = None,
                 test_source: Optional[RawDigits] = None) -> dict[str, LabeledDataset]:
    """Even-Odd task: label 0 for odd digits, 1 for even ones.

    A fraction ``p`` of each class is colored with its aligned color (odd ->
    red, even -> green), the rest with the other one.  Group id is
    ``2 * label + color``.  Validation follows the training distribution, the
    test split is exactly group-balanced.
    """
    return _generate("even_odd", n_train, n_val, p, seed, source, n_test, test_source)


def gen_cmnist(n_train: int, n_val: int, p: float, seed: int,
               source: Optional[RawDigits] = None, n_test: Optional[int] = None,
               test_source: Optional[RawDigits] = None) -> dict[str, LabeledDataset]:
    """Colored-digit task with ten classes and ten colors (k = 100 groups)."""
    return _generate("cmnist", n_train, n_val, p, seed, source, n_test, test_source)


def cmnist_palette() -> np.ndarray:
    rng = np.random.default_rng(PALETTE_SEED)
    return rng.uniform(0.2, 1.0, (10, 3))


def bias_conflicting_groups(ds: LabeledDataset) -> list[int]:
    """Groups whose attribute disagrees with their class."""
    attrs = ds.num_groups // ds.num_classes
    return [g for g in range(ds.num_groups) if g // attrs != g % attrs]


# --------------------------------------------------------------------------
# Group weights

@dataclass
class GroupWeights:
    weights: np.ndarray  # (k,)

    def __getitem__(self, g):
        return self.weights[g]

    def per_sample(self, groups: np.ndarray) -> np.ndarray:
        return self.weights[groups]


def group_weights(train: LabeledDataset, eval: LabeledDataset) -> GroupWeights:
    """Weights that make ``eval`` behave like the training group mix.

    weight(g) = freq_train(g) / freq_eval(g), rescaled so the weighted number
    of eval samples equals their raw count.  Groups missing from train get 0.
    """
    if train.groups is None or eval.groups is None:
        raise DatasetError("both datasets need group labels")
    if train.num_groups != eval.num_groups:
        raise DatasetError("datasets disagree on the number of groups")
    ftrain = train.group_counts() / len(train)
    ecount = eval.group_counts()
    feval = ecount / len(eval)
    w = np.zeros(train.num_groups)
    present = ecount > 0
    w[present] = ftrain[present] / feval[present]
    total = (w * ecount).sum()
    if total > 0:
        w *= len(eval) / total
    return GroupWeights(w)


# --------------------------------------------------------------------------
# TABD files

def write_tabd(ds: LabeledDataset, path) -> None:
    feats = np.ascontiguousarray(ds.features, dtype="<f4")
    n = len(ds)
    c, h, w = feats.shape[1:]
    groups = (np.full(n, NO_GROUP, dtype="<u4") if ds.groups is None
              else ds.groups.astype("<u4"))
    meta = json.dumps(dict(ds.meta, split=ds.split), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(TABD_MAGIC)
        f.write(struct.pack("<IQIIIII", TABD_VERSION, n, c, h, w,
                            ds.num_classes, ds.num_groups))
        f.write(feats.tobytes())
        f.write(ds.labels.astype("<u4").tobytes())
        f.write(groups.tobytes())
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)


def read_tabd(path) -> LabeledDataset:
    data = Path(path).read_bytes()
    if data[:4] != TABD_MAGIC:
        raise DatasetError(f"{path}: bad magic {data[:4]!r}")
    hsize = 4 + struct.calcsize("<IQIIIII")
    if len(data) < hsize:
        raise DatasetError(f"{path}: header truncated")
    version, n, c, h, w, num_classes, num_groups = struct.unpack("<IQIIIII", data[4:hsize])
    if version != TABD_VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    nfeat = n * c * h * w
    need = hsize + 4 * nfeat + 8 * n + 4
    if len(data) < need:
        raise DatasetError(f"{path}: payload shorter than header claims")
    off = hsize
    feats = np.frombuffer(data, "<f4", nfeat, off).reshape(n, c, h, w).astype(np.float32)
    off += 4 * nfeat
    labels = np.frombuffer(data, "<u4", n, off).astype(np.int64)
    off += 4 * n
    graw = np.frombuffer(data, "<u4", n, off)
    off += 4 * n
    (mlen,) = struct.unpack("<I", data[off:off + 4])
    off += 4
    if len(data) < off + mlen:
        raise DatasetError(f"{path}: metadata truncated")
    meta = json.loads(data[off:off + mlen].decode("utf-8"))
    groups = None if n and (graw == NO_GROUP).all() else graw.astype(np.int64)
    split = meta.pop("split", "train")
    return LabeledDataset(base=feats, labels=labels, groups=groups,
                          num_classes=num_classes, num_groups=num_groups,
                          split=split, meta=meta)
