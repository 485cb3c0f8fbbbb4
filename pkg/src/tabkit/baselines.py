"""Reference pipelines: ERM, JTT and stable online G-DRO."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .dataset import LabeledDataset
from .metrics import EvalRecord
from .nn import EarlyStop, ModelSpec, TrainConfig, TrainResult, build_model, predict_dataset, train
from .tab import evaluate


@dataclass
class BaselineResult:
    train: TrainResult
    test_record: Optional[EvalRecord]
    val_record: Optional[EvalRecord]
    train_size: int
    extras: dict = field(default_factory=dict)

    @property
    def model(self):
        return self.train.model


def _seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _finish(result, train_size, val_ds, test_ds, **extras):
    return BaselineResult(
        result, None if test_ds is None else evaluate(result.model, test_ds),
        None if val_ds is None else evaluate(result.model, val_ds), train_size, extras)


def run_erm(train_ds: LabeledDataset, val_ds: Optional[LabeledDataset], config: TrainConfig,
            seed: int, spec: ModelSpec, test_ds: Optional[LabeledDataset] = None) -> BaselineResult:
    s_init, s_train = _seeds(seed, 2)
    result = train(build_model(spec, s_init), train_ds, val_ds, replace(config, seed=s_train))
    return _finish(result, len(train_ds), val_ds, test_ds)


# --------------------------------------------------------------------------
# JTT

@dataclass(frozen=True)
class JttConfig:
    identifier_epochs: int
    upweight: Union[int, str] = "ratio"

    def __post_init__(self):
        if self.identifier_epochs < 1:
            raise ValueError("identifier_epochs must be >= 1")
        if self.upweight != "ratio" and (not isinstance(self.upweight, (int, np.integer))
                                         or self.upweight < 1):
            raise ValueError("upweight must be an integer >= 1 or 'ratio'")


def resolve_upweight(upweight, n_errors: int, n_correct: int) -> int:
    if upweight == "ratio":
        return max(1, round(n_correct / n_errors)) if n_errors else 1
    return int(upweight)


def upsample_errors(train_ds: LabeledDataset, errors: np.ndarray, lambda_up: int) -> LabeledDataset:
    """Dataset where every sample in ``errors`` appears ``lambda_up`` times in total."""
    errors = np.asarray(errors, dtype=np.int64)
    extra = np.repeat(errors, lambda_up - 1)
    return train_ds.subset(np.concatenate([np.arange(len(train_ds)), extra]))


def run_jtt(train_ds, val_ds, config: TrainConfig, jtt: JttConfig, seed: int, spec: ModelSpec,
            test_ds=None) -> BaselineResult:
    """Train an identifier for exactly ``identifier_epochs`` epochs, then retrain
    from scratch with its training errors repeated ``upweight`` times."""
    if jtt.identifier_epochs > config.max_epochs:
        raise ValueError("identifier_epochs exceeds max_epochs")
    # children 0 and 1 match run_erm, so lambda_up = 1 reproduces ERM exactly
    s_init, s_train, s_id_init, s_id_train = _seeds(seed, 4)
    id_cfg = replace(config, seed=s_id_train, max_epochs=jtt.identifier_epochs,
                     early_stop=None)
    ident = train(build_model(spec, s_id_init), train_ds, None, id_cfg)
    preds = predict_dataset(ident.model, train_ds)
    errors = np.flatnonzero(preds != train_ds.labels)
    if len(errors) == 0:
        warnings.warn("JTT identifier made no training errors; falling back to ERM")
    lam = resolve_upweight(jtt.upweight, len(errors), len(train_ds) - len(errors))
    upsampled = upsample_errors(train_ds, errors, lam)
    result = train(build_model(spec, s_init), upsampled, val_ds, replace(config, seed=s_train))
    return _finish(result, len(upsampled), val_ds, test_ds, errors=errors, lambda_up=lam)


# --------------------------------------------------------------------------
# G-DRO

class GdroState:
    """Online group weights q on the simplex, q_g <- q_g exp(gamma * loss_g)."""

    def __init__(self, num_groups: int, gamma: float = 0.01):
        self.q = np.full(num_groups, 1.0 / num_groups)
        self.gamma = gamma

    def update(self, group_losses: np.ndarray, present: np.ndarray) -> None:
        q = self.q.copy()
        q[present] *= np.exp(self.gamma * group_losses[present])
        self.q = q / q.sum()

    def coefficients(self, losses: np.ndarray, groups: np.ndarray) -> np.ndarray:
        """Update q from the batch, then return per-sample weights realising
        sum_g q_g * mean_loss_g."""
        k = len(self.q)
        counts = np.bincount(groups, minlength=k)
        sums = np.bincount(groups, weights=losses, minlength=k)
        present = counts > 0
        means = np.zeros(k)
        means[present] = sums[present] / counts[present]
        self.update(means, present)
        return self.q[groups] / counts[groups]


def run_gdro(train_ds, val_ds, config: TrainConfig, seed: int, spec: ModelSpec,
             gamma: float = 0.01, test_ds=None, on_batch=None) -> BaselineResult:
    """Group-supervised online G-DRO; early stopping watches validation WGA
    when the validation set has group labels."""
    if train_ds.groups is None:
        raise ValueError("G-DRO needs training group labels")
    s_init, s_train = _seeds(seed, 2)
    state = GdroState(train_ds.num_groups, gamma)
    groups = train_ds.groups
    cfg = replace(config, seed=s_train)
    if cfg.early_stop is not None and val_ds is not None and val_ds.groups is not None:
        cfg = replace(cfg, early_stop=replace(cfg.early_stop, monitor="val_wga"))

    def coef(losses, idx):
        return state.coefficients(losses, groups[idx])

    def hook(epoch, batch):
        if on_batch is not None:
            on_batch(state)

    result = train(build_model(spec, s_init), train_ds, val_ds, cfg, batch_coef=coef,
                   on_batch=hook)
    return _finish(result, len(train_ds), val_ds, test_ds, q=state.q.copy())
