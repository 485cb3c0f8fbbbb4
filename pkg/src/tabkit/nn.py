"""Small numpy neural networks trained by mini-batch gradient descent.

Two architectures are supported:

``mlp``
    Fully connected ReLU network on flattened inputs.
``cnn6``
    Six 3x3 "same" convolutions with {16, 16, 32, 32, 64, 64} output maps,
    a ReLU after each, and one linear head on the flattened last feature map.

All parameters of a model live in one flat vector; ``Model.layout`` maps
parameter names to slices of it.  Convolutions run in NHWC layout through
im2col, so conv kernels are stored as (3, 3, in, out).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

CNN6_CHANNELS = (16, 16, 32, 32, 64, 64)

TABM_MAGIC = b"TABM"
TABM_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_shape: tuple
    num_classes: int
    hidden: tuple = (64,)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in ("mlp", "cnn6"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.kind == "cnn6":
            if len(self.input_shape) != 3 or min(self.input_shape) < 1:
                raise ValueError(f"cnn6 needs a (C, H, W) input shape, got {self.input_shape}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "hidden": list(self.hidden)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["kind"], tuple(d["input_shape"]), d["num_classes"], tuple(d.get("hidden", ())))


def layer_plan(spec: ModelSpec) -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) for every parameter tensor, in storage order."""
    plan = []
    if spec.kind == "mlp":
        width = int(np.prod(spec.input_shape))
        for i, h in enumerate(spec.hidden):
            plan += [(f"dense{i}.w", (width, h), width), (f"dense{i}.b", (h,), width)]
            width = h
    else:
        c, hgt, wid = spec.input_shape
        for i, out in enumerate(CNN6_CHANNELS):
            plan += [(f"conv{i}.w", (3, 3, c, out), 9 * c), (f"conv{i}.b", (out,), 9 * c)]
            c = out
        width = hgt * wid * c
    plan += [("head.w", (width, spec.num_classes), width),
             ("head.b", (spec.num_classes,), width)]
    return plan


@dataclass
class Model:
    spec: ModelSpec
    params: np.ndarray
    seed: Optional[int] = None
    layout: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.layout = {}
        off = 0
        for name, shape, _ in layer_plan(self.spec):
            size = int(np.prod(shape))
            self.layout[name] = (off, shape)
            off += size
        if off != self.params.size:
            raise ValueError(f"spec needs {off} parameters, got {self.params.size}")

    @property
    def num_params(self) -> int:
        return self.params.size

    def views(self, flat: Optional[np.ndarray] = None) -> dict[str, np.ndarray]:
        flat = self.params if flat is None else flat
        return {k: flat[o:o + int(np.prod(s))].reshape(s) for k, (o, s) in self.layout.items()}

    def copy(self) -> "Model":
        return Model(self.spec, self.params.copy(), self.seed)

    def astype(self, dtype) -> "Model":
        return Model(self.spec, self.params.astype(dtype), self.seed)


def build_model(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape, fan_in in layer_plan(spec):
        if name.endswith(".b"):
            chunks.append(np.zeros(int(np.prod(shape))))
        else:
            chunks.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), int(np.prod(shape))))
    return Model(spec, np.concatenate(chunks).astype(dtype), seed)


# --------------------------------------------------------------------------
# Forward / backward

def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B*H*W, 9*C) patches of a zero-padded 3x3 window."""
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, h, w, 3, 3, c), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, :, :, di, dj, :] = xp[:, di:di + h, dj:dj + w, :]
    return cols.reshape(b * h * w, 9 * c)


def _col2im(dcols: np.ndarray, shape: tuple) -> np.ndarray:
    b, h, w, c = shape
    dcols = dcols.reshape(b, h, w, 3, 3, c)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for di in range(3):
        for dj in range(3):
            dxp[:, di:di + h, dj:dj + w, :] += dcols[:, :, :, di, dj, :]
    return dxp[:, 1:-1, 1:-1, :]


def forward(model: Model, x: np.ndarray, keep: bool = False):
    """Logits for a batch; with ``keep`` also the activations for backprop."""
    p = model.views()
    dtype = model.params.dtype
    x = np.asarray(x, dtype=dtype)
    cache = []
    if model.spec.kind == "mlp":
        h = x.reshape(len(x), -1)
        for i in range(len(model.spec.hidden)):
            z = h @ p[f"dense{i}.w"] + p[f"dense{i}.b"]
            if keep:
                cache.append(h)
            h = np.maximum(z, 0)
    else:
        h = x.transpose(0, 2, 3, 1)  # NCHW -> NHWC
        for i in range(len(CNN6_CHANNELS)):
            w = p[f"conv{i}.w"]
            cols = _im2col(h)
            z = cols @ w.reshape(-1, w.shape[-1]) + p[f"conv{i}.b"]
            if keep:
                cache.append((cols, h.shape))
            h = np.maximum(z, 0).reshape(h.shape[:3] + (w.shape[-1],))
        h = h.reshape(len(h), -1)
    if keep:
        cache.append(h)
    logits = h @ p["head.w"] + p["head.b"]
    return (logits, cache) if keep else logits


def backward(model: Model, cache: list, dlogits: np.ndarray) -> np.ndarray:
    """Flat gradient of sum(dlogits * logits) w.r.t. the parameters."""
    grad = np.zeros_like(model.params)
    g = model.views(grad)
    p = model.views()
    h = cache[-1]
    g["head.w"][...] = h.T @ dlogits
    g["head.b"][...] = dlogits.sum(0)
    dh = dlogits @ p["head.w"].T
    if model.spec.kind == "mlp":
        # cache[i] is the input of dense layer i; cache[i + 1] its ReLU output.
        for i in reversed(range(len(model.spec.hidden))):
            dz = dh * (cache[i + 1] > 0)
            g[f"dense{i}.w"][...] = cache[i].T @ dz
            g[f"dense{i}.b"][...] = dz.sum(0)
            dh = dz @ p[f"dense{i}.w"].T
    else:
        act = h
        for i in reversed(range(len(CNN6_CHANNELS))):
            cols, in_shape = cache[i]
            w = p[f"conv{i}.w"]
            wmat = w.reshape(-1, w.shape[-1])
            dz = dh.reshape(-1, w.shape[-1]) * (act.reshape(-1, w.shape[-1]) > 0)
            g[f"conv{i}.w"][...] = (cols.T @ dz).reshape(w.shape)
            g[f"conv{i}.b"][...] = dz.sum(0)
            if i > 0:
                dh = _col2im(dz @ wmat.T, in_shape)
                # The input of conv i (ReLU output of conv i-1) is the centre
                # tap of its im2col matrix.
                c = in_shape[-1]
                act = cols[:, 4 * c:5 * c]
    return grad


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Per-sample cross-entropy and softmax probabilities (max-shifted)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(len(labels)), labels]
    probs = np.exp(shifted - lse[:, None])
    return losses, probs


def per_sample_losses(model: Model, x: np.ndarray, labels: np.ndarray):
    """Cross-entropy of every sample and the argmax predictions."""
    labels = np.asarray(labels)
    logits = forward(model, x)
    if not np.isfinite(logits).all():
        raise TrainingError("non-finite activations in forward pass")
    losses, _ = softmax_xent(logits, labels)
    return losses, logits.argmax(axis=1)


def loss_and_grad(model: Model, x: np.ndarray, labels: np.ndarray,
                  coef: Optional[np.ndarray] = None):
    """Losses, predictions and the gradient of sum_i coef_i * loss_i.

    ``coef`` defaults to 1/B (the batch mean).
    """
    labels = np.asarray(labels)
    logits, cache = forward(model, x, keep=True)
    losses, probs = softmax_xent(logits, labels)
    if coef is None:
        coef = np.full(len(labels), 1.0 / len(labels))
    dlogits = probs
    dlogits[np.arange(len(labels)), labels] -= 1.0
    dlogits *= np.asarray(coef, dtype=probs.dtype)[:, None]
    return losses, logits.argmax(axis=1), backward(model, cache, dlogits)


def predict(model: Model, x: np.ndarray, batch_size: int = 2048) -> np.ndarray:
    preds = [forward(model, x[i:i + batch_size]).argmax(axis=1)
             for i in range(0, len(x), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def predict_dataset(model: Model, ds, batch_size: int = 2048) -> np.ndarray:
    out = np.empty(len(ds), dtype=np.int64)
    for i in range(0, len(ds), batch_size):
        idx = np.arange(i, min(i + batch_size, len(ds)))
        out[idx] = forward(model, ds.take(idx)).argmax(axis=1)
    return out


# --------------------------------------------------------------------------
# Optimizers

class Adam:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grad):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * grad
        self.v *= self.b2
        self.v += (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        params -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(params.dtype)


class SGD:
    """Heavy-ball momentum: v <- mu v + g; theta <- theta - lr v."""

    def __init__(self, lr, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.buf = None

    def step(self, params, grad):
        if self.buf is None:
            self.buf = grad.copy()
        else:
            self.buf *= self.momentum
            self.buf += grad
        params -= (self.lr * self.buf).astype(params.dtype)


# --------------------------------------------------------------------------
# Training

@dataclass(frozen=True)
class EarlyStop:
    monitor: str = "val_acc"  # train_acc | val_acc | val_wga
    patience: int = 5
    min_delta: float = 0.001

    def __post_init__(self):
        if self.monitor not in ("train_acc", "val_acc", "val_wga"):
            raise ValueError(f"unknown early-stop monitor {self.monitor!r}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass(frozen=True)
class Plateau:
    """Multiply the LR by ``factor`` after ``patience`` epochs without the
    train loss dropping below best * (1 - rel_tol)."""

    factor: float = 0.1
    patience: int = 10
    rel_tol: float = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    batch_size: int = 256
    max_epochs: int = 100
    early_stop: Optional[EarlyStop] = EarlyStop()
    plateau: Optional[Plateau] = Plateau()
    per_sample_weights: Optional[np.ndarray] = field(default=None, compare=False)
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")

    def make_optimizer(self):
        if self.optimizer == "adam":
            return Adam(self.lr, self.betas)
        return SGD(self.lr, self.momentum)


@dataclass
class TrainResult:
    model: Model
    epochs_run: int
    train_loss: list
    train_acc: list
    val_acc: list
    val_wga: list
    lrs: list
    best_epoch: int
    stopped_early: bool

    @property
    def final_lr(self) -> float:
        return self.lrs[-1]


def _group_min_acc(preds, labels, groups):
    accs = [np.mean(preds[groups == g] == labels[groups == g]) for g in np.unique(groups)]
    return float(min(accs))


def train(model: Model, train_ds, val_ds=None, config: TrainConfig = TrainConfig(),
          recorder=None, batch_coef: Optional[Callable] = None,
          on_batch: Optional[Callable] = None) -> TrainResult:
    """Mini-batch ERM with weight decay, early stopping and LR-on-plateau.

    The model is trained in place and also returned inside the result.  On
    stop, the parameters of the best monitored epoch are restored.

    ``recorder.record(epoch, indices, losses)`` receives the training-pass
    loss of every sample (computed before the update of its batch).
    ``batch_coef(losses, indices)`` may return custom per-sample objective
    coefficients; by default the batch loss is the (weighted) mean.
    ``on_batch(epoch, batch)`` is called after every optimizer step.
    """
    n = len(train_ds)
    if n == 0:
        raise TrainingError("empty training set")
    es = config.early_stop
    if es is not None and es.monitor.startswith("val") and val_ds is None:
        raise TrainingError(f"early stopping on {es.monitor} needs a validation set")
    if es is not None and es.monitor == "val_wga" and val_ds.groups is None:
        raise TrainingError("val_wga monitoring needs validation group labels")
    psw = config.per_sample_weights
    if psw is not None:
        psw = np.asarray(psw, dtype=np.float64)
        if len(psw) != n:
            raise TrainingError("per_sample_weights length differs from dataset size")

    rng = np.random.default_rng(config.seed)
    opt = config.make_optimizer()
    labels = train_ds.labels
    params = model.params
    history = dict(train_loss=[], train_acc=[], val_acc=[], val_wga=[], lrs=[])
    best, best_epoch, best_params, wait = -np.inf, 0, params.copy(), 0
    best_loss, plateau_wait = np.inf, 0
    stopped = False

    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            x, y = train_ds.take(idx), labels[idx]
            logits, cache = forward(model, x, keep=True)
            losses, probs = softmax_xent(logits, y)
            if not np.isfinite(losses).all():
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            if recorder is not None:
                recorder.record(epoch, idx, losses)
            if batch_coef is not None:
                coef = batch_coef(losses, idx)
            elif psw is not None:
                w = psw[idx]
                s = w.sum()
                coef = w / s if s > 0 else np.zeros_like(w)
            else:
                coef = np.full(len(idx), 1.0 / len(idx))
            dlogits = probs
            dlogits[np.arange(len(y)), y] -= 1.0
            dlogits *= np.asarray(coef, dtype=probs.dtype)[:, None]
            grad = backward(model, cache, dlogits)
            if config.weight_decay:
                grad += config.weight_decay * params
            opt.step(params, grad)
            loss_sum += float(losses.sum())
            correct += int((logits.argmax(1) == y).sum())
            if on_batch is not None:
                on_batch(epoch, b)

        history["train_loss"].append(loss_sum / n)
        history["train_acc"].append(correct / n)
        history["lrs"].append(opt.lr)
        if val_ds is not None:
            vp = predict_dataset(model, val_ds)
            history["val_acc"].append(float(np.mean(vp == val_ds.labels)))
            if val_ds.groups is not None:
                history["val_wga"].append(_group_min_acc(vp, val_ds.labels, val_ds.groups))

        if config.plateau is not None:
            pl = config.plateau
            cur = history["train_loss"][-1]
            if cur < best_loss * (1 - pl.rel_tol):
                best_loss, plateau_wait = cur, 0
            else:
                plateau_wait += 1
                if plateau_wait >= pl.patience:
                    opt.lr *= pl.factor
                    plateau_wait = 0

        if es is not None:
            value = history[es.monitor][-1]
            if value > best + es.min_delta:
                best, best_epoch, wait = value, epoch + 1, 0
                best_params = params.copy()
            else:
                wait += 1
                if wait >= es.patience:
                    stopped = True
                    break
        else:
            best_epoch = epoch + 1

    if es is not None:
        params[...] = best_params
    return TrainResult(model=model, epochs_run=len(history["train_loss"]),
                       best_epoch=best_epoch, stopped_early=stopped, **history)


# --------------------------------------------------------------------------
# Checkpoints

def save_model(model: Model, path) -> None:
    desc = json.dumps(dict(model.spec.to_dict(), seed=model.seed), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(TABM_MAGIC)
        f.write(struct.pack("<II", TABM_VERSION, len(desc)))
        f.write(desc)
        f.write(struct.pack("<Q", model.params.size))
        f.write(model.params.astype("<f4").tobytes())


def load_model(path) -> Model:
    data = Path(path).read_bytes()
    if data[:4] != TABM_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    version, dlen = struct.unpack("<II", data[4:12])
    if version != TABM_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    desc = json.loads(data[12:12 + dlen].decode())
    off = 12 + dlen
    (count,) = struct.unpack("<Q", data[off:off + 8])
    off += 8
    if len(data) - off < 4 * count:
        raise ValueError(f"{path}: payload shorter than header claims")
    params = np.frombuffer(data, "<f4", count, off).astype(np.float32)
    seed = desc.pop("seed", None)
    return Model(ModelSpec.from_dict(desc), params, seed)
