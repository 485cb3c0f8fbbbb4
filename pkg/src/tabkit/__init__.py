"""Hyperparameter-free bias mitigation from loss-history clustering.

Train a helper model while recording per-sample losses, split every class's
loss histories into two clusters, upsample the smaller cluster until both
match, and retrain from scratch on the rebalanced multiset.
"""
from .baselines import JttConfig, run_erm, run_gdro, run_jtt
from .clustering import kmeans2, minibatch_kmeans2
from .dataset import LabeledDataset, gen_cmnist, gen_even_odd, group_weights, import_idx
from .history import LossHistoryMatrix, read_history, write_history
from .metrics import EvalRecord, GridResult, mms, pou, rebalance_stats, wga
from .nn import ModelSpec, TrainConfig, build_model, train
from .tab import apply_manifest, build_manifest, eta_transform, partition_classes, run_tab

__version__ = "0.1.0"
