"""Per-sample loss histories recorded while training the identifier model."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

TABH_MAGIC = b"TABH"
TABH_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


class HistoryError(ValueError):
    pass


@dataclass
class LossHistoryMatrix:
    """``values[i, t]``: training loss of sample i at epoch t (float32)."""

    values: np.ndarray
    labels: np.ndarray

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    def rows_of_class(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


def finalize(epoch_losses: Sequence[np.ndarray], labels) -> LossHistoryMatrix:
    """Stack T per-epoch loss vectors (each of length N) into an N x T matrix."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    for t, v in enumerate(epoch_losses):
        if len(v) != n:
            raise HistoryError(f"epoch {t} has {len(v)} losses, expected {n}")
    if len(epoch_losses) == 0:
        values = np.zeros((n, 0), dtype=np.float32)
    else:
        values = np.stack([np.asarray(v, dtype=np.float32) for v in epoch_losses], axis=1)
    bad = np.argwhere(~np.isfinite(values))
    if len(bad):
        i, t = bad[0]
        raise HistoryError(f"non-finite loss for sample {i} at epoch {t}")
    if (values < 0).any():
        raise HistoryError("losses must be non-negative")
    return LossHistoryMatrix(values, labels)


class LossRecorder:
    """Training-loop hook collecting every sample's loss at every epoch."""

    def __init__(self, n: int):
        self.n = n
        self.epochs: list[np.ndarray] = []

    def record(self, epoch: int, indices, losses) -> None:
        while len(self.epochs) <= epoch:
            self.epochs.append(np.full(self.n, np.nan, dtype=np.float32))
        self.epochs[epoch][indices] = losses

    def finalize(self, labels) -> LossHistoryMatrix:
        return finalize(self.epochs, labels)


def write_history(h: LossHistoryMatrix, path) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(TABH_MAGIC, TABH_VERSION, h.N, h.T))
        f.write(np.ascontiguousarray(h.values, dtype="<f4").tobytes())
        f.write(h.labels.astype("<u4").tobytes())


def read_history(path) -> LossHistoryMatrix:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise HistoryError(f"{path}: payload shorter than header claims")
    magic, version, n, t = _HEADER.unpack_from(data)
    if magic != TABH_MAGIC:
        raise HistoryError(f"{path}: bad magic {magic!r}")
    if version != TABH_VERSION:
        raise HistoryError(f"{path}: unsupported version {version}")
    need = _HEADER.size + 4 * n * t + 4 * n
    if len(data) < need:
        raise HistoryError(f"{path}: payload shorter than header claims")
    if len(data) > need:
        raise HistoryError(f"{path}: {len(data) - need} trailing bytes after payload")
    values = np.frombuffer(data, "<f4", n * t, _HEADER.size).reshape(n, t).astype(np.float32)
    labels = np.frombuffer(data, "<u4", n, _HEADER.size + 4 * n * t).astype(np.int64)
    return LossHistoryMatrix(values, labels)
