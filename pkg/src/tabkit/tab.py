"""Targeted augmentations for bias mitigation.

The pipeline has no tunables of its own:

1. train an identifier model (early-stopped on training accuracy) while
   recording every sample's per-epoch loss;
2. split each class's loss histories into two clusters with k-means; the
   smaller one is the class's minority pseudo-group;
3. upsample each minority pseudo-group, drawing with replacement, until it
   matches its class's majority pseudo-group;
4. train a fresh model on the augmented multiset exactly like plain ERM.
"""
from __future__ import annotations

import json
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .clustering import kmeans2
from .dataset import LabeledDataset, bias_conflicting_groups, group_weights
from .history import LossHistoryMatrix, LossRecorder
from .metrics import EvalRecord, RebalanceStats, rebalance_stats
from .nn import EarlyStop, Model, ModelSpec, TrainConfig, TrainResult, build_model, predict_dataset, train


@dataclass
class PseudoGroupPartition:
    majority: dict  # label -> sorted index array
    minority: dict

    @property
    def labels(self) -> list:
        return sorted(self.majority)

    def minority_indices(self) -> np.ndarray:
        parts = [self.minority[l] for l in self.labels]
        return np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)


def partition_classes(h: LossHistoryMatrix, seed: int = 0) -> PseudoGroupPartition:
    """Two-way k-means of every class's loss histories.

    The larger cluster is the majority; on an exact size tie, the cluster with
    the higher mean final-epoch loss is the minority.
    """
    majority, minority = {}, {}
    for label in np.unique(h.labels):
        idx = h.rows_of_class(label)
        if len(idx) == 1:
            majority[int(label)], minority[int(label)] = idx, idx[:0]
            continue
        cl = kmeans2(h.values[idx], seed=seed + int(label))
        a, b = idx[cl.assignment == 0], idx[cl.assignment == 1]
        if len(a) == len(b) and h.T > 0:
            a_last, b_last = h.values[a, -1].mean(), h.values[b, -1].mean()
            small, big = (a, b) if a_last > b_last else (b, a)
        else:
            small, big = (a, b) if len(a) < len(b) else (b, a)
        majority[int(label)], minority[int(label)] = big, small
    return PseudoGroupPartition(majority, minority)


@dataclass
class ManifestEntry:
    index: int
    copies: int
    transform_seed: int


@dataclass
class AugmentationManifest:
    entries: list
    classes: list  # [{"label", "z", "majority_size", "minority_size"}]
    warnings: list = field(default_factory=list)

    @property
    def total_copies(self) -> int:
        return sum(e.copies for e in self.entries)

    def to_json(self) -> str:
        header = {"classes": self.classes, "warnings": self.warnings}
        body = [{"index": e.index, "copies": e.copies, "transform_seed": e.transform_seed}
                for e in self.entries]
        return json.dumps([header] + body, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "AugmentationManifest":
        data = json.loads(text)
        if not isinstance(data, list) or not data or "classes" not in data[0]:
            raise ValueError("manifest must be a JSON array starting with a header object")
        header, body = data[0], data[1:]
        entries = [ManifestEntry(int(e["index"]), int(e["copies"]), int(e["transform_seed"]))
                   for e in body]
        return cls(entries, header["classes"], header.get("warnings", []))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "AugmentationManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_manifest(partition: PseudoGroupPartition, seed: int = 0) -> AugmentationManifest:
    """Draw z_l = |majority| - |minority| minority indices per class, with
    replacement, and aggregate repeats into copy counts."""
    rng = np.random.default_rng(seed)
    entries, classes, notes = [], [], []
    for label in partition.labels:
        big, small = partition.majority[label], partition.minority[label]
        z = len(big) - len(small)
        classes.append({"label": int(label), "z": int(z), "majority_size": int(len(big)),
                        "minority_size": int(len(small))})
        if z > 0 and len(small) == 0:
            notes.append(f"class {label}: empty minority cluster, no augmentation")
            classes[-1]["z"] = 0
            continue
        if z == 0:
            continue
        draws = small[rng.integers(0, len(small), z)]
        for index, copies in sorted(Counter(draws.tolist()).items()):
            entries.append(ManifestEntry(int(index), int(copies),
                                         int(rng.integers(0, 2**31 - 1))))
    return AugmentationManifest(entries, classes, notes)


def apply_manifest(train_ds: LabeledDataset, manifest: AugmentationManifest,
                   transform: Optional[Callable] = None) -> LabeledDataset:
    """Original samples followed by the manifest's duplicates.

    Without ``transform`` the duplicates share storage with their sources.
    With it, copy ``k`` of an entry is ``transform(x, seed)`` with a seed
    derived from the entry's transform_seed and ``k``.
    """
    n = len(train_ds)
    src = [e.index for e in manifest.entries for _ in range(e.copies)]
    for e in manifest.entries:
        if not 0 <= e.index < n:
            raise IndexError(f"manifest index {e.index} out of range for {n} samples")
    src = np.asarray(src, dtype=np.int64)
    order = np.concatenate([np.arange(n), src])
    out = train_ds.subset(order)
    if transform is None or len(src) == 0:
        return out
    extra = np.empty((len(src),) + train_ds.shape, dtype=np.float32)
    k = 0
    for e in manifest.entries:
        x = train_ds.take([e.index])[0]
        for c in range(e.copies):
            seed = int(np.random.SeedSequence([e.transform_seed, c]).generate_state(1)[0])
            extra[k] = transform(x, seed)
            k += 1
    base = np.concatenate([train_ds.features, extra])
    return replace(out, base=base, rows=None)


def _gaussian_kernel(size=5, sigma=1.0):
    r = np.arange(size) - size // 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def eta_transform(image: np.ndarray, seed: int, max_angle: float = np.pi / 6,
                  max_shift: float = 0.1, blur: bool = True) -> np.ndarray:
    """Random rotation, translation and 5x5 Gaussian blur of a (C, H, W) image.

    Rotation angle ~ U[-max_angle, max_angle] about the image centre, shifts
    ~ U[0, max_shift * W] and U[0, max_shift * H]; bilinear resampling with
    zero fill.  Output is clipped to [0, 1].
    """
    rng = np.random.default_rng(seed)
    img = np.asarray(image, dtype=np.float64)
    _, h, w = img.shape
    theta = rng.uniform(-max_angle, max_angle)
    dx = rng.uniform(0, max_shift * w)
    dy = rng.uniform(0, max_shift * h)
    cos, sin = np.cos(theta), np.sin(theta)
    # affine_transform maps output coords to input coords: in = R^-1 (out - c - t) + c
    inv = np.array([[cos, sin], [-sin, cos]])
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - inv @ (centre + np.array([dy, dx]))
    out = np.empty_like(img)
    kernel = _gaussian_kernel()
    for c in range(img.shape[0]):
        if theta == 0 and dx == 0 and dy == 0:
            ch = img[c].copy()
        else:
            ch = ndimage.affine_transform(img[c], inv, offset=offset, order=1,
                                          mode="constant", cval=0.0)
        if blur:
            ch = ndimage.convolve(ch, kernel, mode="constant", cval=0.0)
        out[c] = ch
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# End-to-end

@dataclass
class TabRunResult:
    identifier: TrainResult
    history: LossHistoryMatrix
    partition: PseudoGroupPartition
    manifest: AugmentationManifest
    robust: TrainResult
    augmented_size: int
    robust_init: np.ndarray = field(repr=False)
    test_record: Optional[EvalRecord] = None
    val_record: Optional[EvalRecord] = None
    rebalance: Optional[RebalanceStats] = None

    @property
    def model(self) -> Model:
        return self.robust.model


def evaluate(model: Model, ds: LabeledDataset) -> EvalRecord:
    return EvalRecord(predict_dataset(model, ds), ds.labels, ds.groups, ds.num_groups)


def run_tab(train_ds: LabeledDataset, val_ds: LabeledDataset, config: TrainConfig, seed: int,
            spec: ModelSpec, test_ds: Optional[LabeledDataset] = None) -> TabRunResult:
    """Run the whole pipeline; ``config`` is the plain ERM training setup.

    The identifier uses ``config`` with early stopping switched to training
    accuracy; the robust model uses ``config`` unchanged.  Group labels, when
    present, are only read for the returned evaluation statistics.
    """
    s_id_init, s_id_train, s_cluster, s_manifest, s_init, s_train = (
        int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(6))

    es = config.early_stop or EarlyStop()
    id_cfg = replace(config, seed=s_id_train,
                     early_stop=EarlyStop("train_acc", es.patience, es.min_delta))
    recorder = LossRecorder(len(train_ds))
    identifier = train(build_model(spec, s_id_init), train_ds, None, id_cfg, recorder=recorder)
    history = recorder.finalize(train_ds.labels)

    partition = partition_classes(history, seed=s_cluster)
    manifest = build_manifest(partition, seed=s_manifest)
    for note in manifest.warnings:
        warnings.warn(note)
    augmented = apply_manifest(train_ds, manifest)

    robust_model = build_model(spec, s_init)
    robust_init = robust_model.params.copy()
    robust = train(robust_model, augmented, val_ds, replace(config, seed=s_train))

    result = TabRunResult(identifier, history, partition, manifest, robust,
                          len(augmented), robust_init)
    if val_ds is not None:
        result.val_record = evaluate(robust.model, val_ds)
    if test_ds is not None:
        result.test_record = evaluate(robust.model, test_ds)
    if train_ds.groups is not None:
        result.rebalance = rebalance_stats(manifest, train_ds.groups,
                                           bias_conflicting_groups(train_ds),
                                           partition.minority_indices())
    return result
