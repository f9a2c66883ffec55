"""Seeded, stratified data splits for the federated simulation.

Every function here works on row indices and returns dataset views built with
``EncodedDataset.subset``; the original row order is preserved inside each
piece.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .encoding import EncodedDataset
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SHARD_MODES = ("stratified", "random", "label_sorted")
POISON_MODES = ("label_shuffle", "label_flip")


@dataclass(frozen=True)
class SplitPlan:
    test_fraction: float = 0.30
    global_train_fraction: float = 0.2
    n_clients: int = 6
    seed: int = 0
    shard_mode: str = "stratified"

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if not 0.0 <= self.global_train_fraction < 1.0:
            raise ConfigError(f"global_train_fraction must lie in [0, 1), got {self.global_train_fraction}")
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")
        if self.shard_mode not in SHARD_MODES:
            raise ConfigError(f"shard_mode must be one of {SHARD_MODES}")


@dataclass
class FederatedSplit:
    client_shards: list
    global_train: EncodedDataset
    test: EncodedDataset
    # row index in the source dataset -> "test" | "global" | "client_<k>"
    assignment: list = field(default_factory=list)
    source_ids: list = field(default_factory=list)
    source_labels: list = field(default_factory=list)

    def export_provenance(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["sample_id", "class", "assignment"])
            for sid, label, where in zip(self.source_ids, self.source_labels, self.assignment):
                w.writerow([sid, label, where])


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def proportional_count(n: int, fraction: float) -> int:
    """round(n * fraction) with round-half-even on the decimal value of ``fraction``."""
    return round(Fraction(repr(fraction)) * n)


def _stratified_indices(labels: np.ndarray, fraction: float, rng: np.random.Generator,
                        keep_one: bool) -> tuple:
    """Per class, pick round(count * fraction) rows for the second piece.

    With ``keep_one`` a class of two or more rows always leaves at least one
    row in the first piece, and singleton classes stay entirely in it.
    """
    first, second = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = proportional_count(len(idx), fraction)
        if keep_one:
            if len(idx) == 1:
                logger.info("class %d has a single sample; kept on the training side", c)
                k = 0
            k = min(k, len(idx) - 1)
        idx = rng.permutation(idx)
        second.extend(idx[:k])
        first.extend(idx[k:])
    return np.sort(np.asarray(first, dtype=int)), np.sort(np.asarray(second, dtype=int))


def stratified_split(ds: EncodedDataset, test_fraction: float, seed) -> tuple:
    """Stratified (train, test) views; per-class test counts use round-half-even."""
    train_idx, test_idx = stratified_split_indices(ds, test_fraction, seed)
    return ds.subset(train_idx), ds.subset(test_idx)


def stratified_split_indices(ds: EncodedDataset, test_fraction: float, seed) -> tuple:
    if len(ds) == 0:
        raise DataError("cannot split an empty dataset")
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    return _stratified_indices(ds.label_indices(), test_fraction, _rng(seed), keep_one=True)


def local_global_split(train: EncodedDataset, global_train_fraction: float, seed) -> tuple:
    local_idx, global_idx = local_global_split_indices(train, global_train_fraction, seed)
    return train.subset(local_idx), train.subset(global_idx)


def local_global_split_indices(train: EncodedDataset, global_train_fraction: float, seed) -> tuple:
    if len(train) == 0:
        raise DataError("cannot split an empty dataset")
    if not 0.0 <= global_train_fraction < 1.0:
        raise ConfigError(f"global_train_fraction must lie in [0, 1), got {global_train_fraction}")
    return _stratified_indices(train.label_indices(), global_train_fraction, _rng(seed), keep_one=True)


def partition_client_indices(labels: np.ndarray, n_clients: int, seed, mode: str = "stratified") -> list:
    n = len(labels)
    if n_clients < 1:
        raise ConfigError("n_clients must be >= 1")
    if n < n_clients:
        raise DataError(f"{n} samples cannot fill {n_clients} client shards")
    rng = _rng(seed)
    if mode == "stratified":
        # shuffle within each class, lay classes end to end, deal round-robin
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)])
        shards = [order[k::n_clients] for k in range(n_clients)]
    elif mode == "random":
        shards = [order for order in np.array_split(rng.permutation(n), n_clients)]
    elif mode == "label_sorted":
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)])
        shards = list(np.array_split(order, n_clients))
    else:
        raise ConfigError(f"shard mode must be one of {SHARD_MODES}, got {mode!r}")
    return [np.sort(s) for s in shards]


def partition_clients(local_train: EncodedDataset, n_clients: int, seed, mode: str = "stratified") -> list:
    """Equal client shards; sizes differ by at most one row."""
    parts = partition_client_indices(local_train.label_indices(), n_clients, seed, mode)
    return [local_train.subset(p) for p in parts]


def poison_shard(shard: EncodedDataset, mode: str, seed) -> EncodedDataset:
    """Corrupt a shard's labels; features are left untouched."""
    if len(shard) == 0:
        raise DataError("cannot poison an empty shard")
    labels = shard.labels_onehot
    if mode == "label_shuffle":
        perm = _rng(seed).permutation(len(shard))
        new = labels[perm]
    elif mode == "label_flip":
        new = np.roll(labels, 1, axis=1)
    else:
        raise ConfigError(f"poison mode must be one of {POISON_MODES}, got {mode!r}")
    return shard.with_labels(new.copy())


def make_federated_split(ds: EncodedDataset, plan: SplitPlan) -> FederatedSplit:
    """test / global-train / client shards, all seeded from ``plan.seed``."""
    ss = np.random.SeedSequence(plan.seed)
    s_test, s_global, s_clients = ss.spawn(3)
    train_idx, test_idx = stratified_split_indices(ds, plan.test_fraction, s_test)
    labels = ds.label_indices()
    local_pos, global_pos = _stratified_indices(labels[train_idx], plan.global_train_fraction,
                                                _rng(s_global), keep_one=True)
    local_idx, global_idx = train_idx[local_pos], train_idx[global_pos]
    shard_pos = partition_client_indices(labels[local_idx], plan.n_clients, s_clients, plan.shard_mode)

    assignment = [""] * len(ds)
    for i in test_idx:
        assignment[i] = "test"
    for i in global_idx:
        assignment[i] = "global"
    shards = []
    for k, pos in enumerate(shard_pos):
        idx = local_idx[pos]
        for i in idx:
            assignment[i] = f"client_{k}"
        shards.append(ds.subset(idx))
    return FederatedSplit(
        client_shards=shards,
        global_train=ds.subset(global_idx),
        test=ds.subset(test_idx),
        assignment=assignment,
        source_ids=list(ds.sample_ids),
        source_labels=[ds.class_names[c] for c in labels],
    )
