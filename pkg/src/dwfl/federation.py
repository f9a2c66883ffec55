"""Federated rounds: local training, dynamic weights, aggregation, global update.

The server side only ever sees ``ClientReport`` objects: final weights plus a
handful of scalars. Shard matrices stay inside ``run_client``.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .encoding import EncodedDataset
from .errors import AggregationError, ConfigError, DivergenceError, FederationError, ShapeError
from .nn import (
    BN_EPSILON,
    DEFAULT_HIDDEN_WIDTHS,
    Model,
    ModelWeights,
    TrainConfig,
    WeightEntry,
    build_model,
    train,
)
from .partitioning import FederatedSplit, poison_shard

logger = logging.getLogger(__name__)

WORKERS_ENV = "DWFL_WORKERS"
CLIENT_INIT_MODES = ("independent", "shared")


class AggregationStrategy(str, enum.Enum):
    FEDAVG = "fedavg"
    FEDMIN = "fedmin"
    FEDMAX = "fedmax"
    DWFL_AVG = "dwfl_avg"
    DWFL_MIN = "dwfl_min"
    DWFL_MAX = "dwfl_max"

    @classmethod
    def parse(cls, tag) -> "AggregationStrategy":
        if isinstance(tag, cls):
            return tag
        norm = str(tag).strip().lower().replace("-", "_")
        try:
            return cls(norm)
        except ValueError:
            raise ConfigError(f"unknown aggregation strategy {tag!r}; "
                              f"expected one of {[s.value for s in cls]}") from None

    @property
    def is_dynamic(self) -> bool:
        return self.value.startswith("dwfl")


@dataclass
class ClientReport:
    client_id: int
    weights: Optional[ModelWeights]
    val_accuracy: float
    n_samples: int
    train_seconds: float
    failed: bool = False
    error: str = ""

    def __post_init__(self):
        if not self.failed and not 0.0 <= self.val_accuracy <= 1.0:
            raise ValueError(f"val_accuracy {self.val_accuracy} outside [0, 1]")


@dataclass
class DynamicWeights:
    betas: list
    fallback: bool = False


@dataclass(frozen=True)
class RoundConfig:
    n_rounds: int = 1
    strategy: AggregationStrategy = AggregationStrategy.DWFL_AVG
    client_train: TrainConfig = field(default_factory=TrainConfig)
    global_train: TrainConfig = field(default_factory=TrainConfig)
    val_split: float = 0.1
    global_val_split: float = 0.0
    # dwfl_min / dwfl_max: scale by beta before (True) or after (False) the extreme
    dwfl_scale_first: bool = True
    # client ids whose shard is label-poisoned before training (test harness)
    poisoned_clients: tuple = ()
    poison_mode: str = "label_shuffle"
    hidden_widths: tuple = DEFAULT_HIDDEN_WIDTHS
    # "shared": every client trains under the run seed; "independent": per-client derived seeds
    client_init: str = "shared"
    workers: Optional[int] = None

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ConfigError("n_rounds must be >= 1")
        if not 0.0 <= self.val_split < 1.0:
            raise ConfigError("val_split must lie in [0, 1)")
        if self.client_init not in CLIENT_INIT_MODES:
            raise ConfigError(f"client_init must be one of {CLIENT_INIT_MODES}")
        object.__setattr__(self, "strategy", AggregationStrategy.parse(self.strategy))


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
        if n < 1:
            raise ConfigError(f"{WORKERS_ENV} must be >= 1")
        return n
    return os.cpu_count() or 1


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def run_client(client_id: int, shard: EncodedDataset, init_weights: Optional[ModelWeights],
               config: TrainConfig, val_split: float = 0.1,
               hidden_widths: Sequence[int] = DEFAULT_HIDDEN_WIDTHS) -> ClientReport:
    """Train one local model on its shard and report weights plus scalars.

    With ``init_weights`` absent the model starts from a fresh initialization
    seeded by ``config.seed``. A non-finite loss yields a failed report
    instead of raising.
    """
    if len(shard) == 0:
        raise FederationError(f"client {client_id} has an empty shard")
    if len(np.unique(shard.label_indices())) < 2:
        logger.info("client %d shard holds a single class", client_id)
    model = build_model(shard.input_dim, shard.n_classes, config, hidden_widths)
    if init_weights is not None:
        model.set_weights(init_weights)
    start = time.monotonic()
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            outcome = train(model, shard.features, shard.labels_onehot, config, val_split)
    except DivergenceError as exc:
        logger.warning("client %d diverged and is excluded: %s", client_id, exc)
        return ClientReport(client_id, None, 0.0, len(shard), time.monotonic() - start,
                            failed=True, error=str(exc))
    elapsed = time.monotonic() - start
    weights = model.get_weights()
    if not all(np.all(np.isfinite(e.values)) for e in weights.entries):
        logger.warning("client %d produced non-finite weights and is excluded", client_id)
        return ClientReport(client_id, None, 0.0, len(shard), elapsed, failed=True,
                            error="non-finite weights")
    return ClientReport(client_id, weights, outcome.val_accuracy, len(shard), elapsed)


def compute_dynamic_weights(reports: Sequence[ClientReport]) -> DynamicWeights:
    """beta_i = acc_i / sum(acc) over the non-failed reports, in report order."""
    live = [r for r in reports if not r.failed]
    if not live:
        raise AggregationError("no successful client reports to weight")
    # exact rational normalization: betas are correctly rounded, so an exact
    # rescaling of every accuracy leaves them bit-identical
    accs = [Fraction(float(r.val_accuracy)) for r in live]
    total = sum(accs)
    if total <= 0:
        logger.warning("all client validation accuracies are zero; using uniform weights")
        return DynamicWeights([1.0 / len(live)] * len(live), fallback=True)
    return DynamicWeights([float(a / total) for a in accs])


def _check_compatible(reports: Sequence[ClientReport]) -> None:
    ref = reports[0].weights
    for r in reports[1:]:
        try:
            ref.check_compatible(r.weights)
        except ShapeError as exc:
            raise AggregationError(f"client {r.client_id} is incompatible with client "
                                   f"{reports[0].client_id}: {exc}") from None


def aggregate(reports: Sequence[ClientReport], strategy, betas: Optional[Sequence[float]] = None,
              scale_first: bool = True) -> ModelWeights:
    """Combine client weights elementwise under one of the six strategies.

    ``betas`` default to ``compute_dynamic_weights(reports)`` for the dwfl
    strategies. With ``scale_first=False`` the dwfl min/max variants pick the
    extreme over raw weights and rescale the winner by ``N * beta`` of the
    client it came from.
    """
    strategy = AggregationStrategy.parse(strategy)
    live = [r for r in reports if not r.failed]
    if not live:
        raise AggregationError("no successful client reports to aggregate")
    _check_compatible(live)
    n = len(live)
    if strategy.is_dynamic:
        if betas is None:
            betas = compute_dynamic_weights(live).betas
        if len(betas) != n:
            raise AggregationError(f"{len(betas)} betas for {n} reports")
        beta_arr = np.asarray(betas, dtype=np.float64)

    out = []
    for k, ref in enumerate(live[0].weights.entries):
        stack = np.stack([r.weights.entries[k].values for r in live])
        if strategy is AggregationStrategy.FEDAVG:
            agg = stack.sum(axis=0) / n
        elif strategy is AggregationStrategy.FEDMIN:
            agg = stack.min(axis=0)
        elif strategy is AggregationStrategy.FEDMAX:
            agg = stack.max(axis=0)
        else:
            b = beta_arr.reshape((n,) + (1,) * (stack.ndim - 1))
            if strategy is AggregationStrategy.DWFL_AVG:
                agg = (b * stack).sum(axis=0)
            elif scale_first:
                scaled = b * stack
                agg = scaled.min(axis=0) if strategy is AggregationStrategy.DWFL_MIN else scaled.max(axis=0)
            else:
                pick = stack.argmin(axis=0) if strategy is AggregationStrategy.DWFL_MIN else stack.argmax(axis=0)
                extreme = np.take_along_axis(stack, pick[None], axis=0)[0]
                agg = n * beta_arr[pick] * extreme
        if ref.role == "bn_running_var":
            agg = np.maximum(agg, BN_EPSILON)
        out.append(WeightEntry(ref.layer_index, ref.role, agg))
    return ModelWeights(out)


@dataclass
class RoundRecord:
    round_index: int
    strategy: str
    reports: list
    betas: list
    fallback: bool
    checksum: str
    global_fine_tuned: bool
    global_history: list = field(default_factory=list)

    def client_records(self) -> list:
        """One dict per client; failed clients carry a null beta."""
        live_betas = iter(self.betas)
        rows = []
        for r in self.reports:
            rows.append({
                "round": self.round_index,
                "client_id": r.client_id,
                "val_accuracy": r.val_accuracy,
                "beta": None if r.failed else next(live_betas),
                "n_samples": r.n_samples,
                "train_seconds": round(r.train_seconds, 4),
                "failed": r.failed,
            })
        return rows

    def summary_record(self) -> dict:
        return {
            "round": self.round_index,
            "strategy": self.strategy,
            "n_clients": len(self.reports),
            "n_failed": sum(r.failed for r in self.reports),
            "beta_fallback": self.fallback,
            "global_fine_tuned": self.global_fine_tuned,
            "checksum": self.checksum,
        }


@dataclass
class FederationResult:
    global_model: Model
    rounds: list
    train_seconds: float

    def export_round_log(self, path, include_timing: bool = True) -> None:
        """JSON-lines: per-client records then one summary record per round."""
        with open(path, "w") as fh:
            for rec in self.rounds:
                for row in rec.client_records():
                    if not include_timing:
                        row.pop("train_seconds")
                    fh.write(json.dumps({"type": "client", **row}, sort_keys=True) + "\n")
                fh.write(json.dumps({"type": "round", **rec.summary_record()}, sort_keys=True) + "\n")


def prepare_shards(split: FederatedSplit, round_config: RoundConfig) -> list:
    """Client shards with the configured poisoning applied (test harness)."""
    shards = list(split.client_shards)
    if not shards:
        raise FederationError("split has no client shards")
    for cid in round_config.poisoned_clients:
        if not 0 <= cid < len(shards):
            raise ConfigError(f"poisoned client id {cid} out of range")
        shards[cid] = poison_shard(shards[cid], round_config.poison_mode,
                                   derive_seed(round_config.client_train.seed, 7919, cid))
    return shards


def train_clients(shards: Sequence[EncodedDataset], round_config: RoundConfig, round_index: int,
                  init: Optional[ModelWeights]) -> list:
    """Train every client for one round; reports come back sorted by client_id.

    With ``client_init == "shared"`` every client trains under the same seed,
    so first-round clients start from one fresh initialization and identical
    shards yield bit-identical weights. ``"independent"`` gives each client
    its own derived seed.
    """
    base_seed = round_config.client_train.seed
    if round_config.client_init == "shared":
        seed = base_seed if round_index == 0 else derive_seed(base_seed, round_index)
        seeds = [seed] * len(shards)
    else:
        seeds = [derive_seed(base_seed, round_index, cid) for cid in range(len(shards))]
    configs = [replace(round_config.client_train, seed=s) for s in seeds]

    def task(cid):
        return run_client(cid, shards[cid], init, configs[cid], round_config.val_split,
                          round_config.hidden_widths)

    workers = round_config.workers or default_workers()
    if workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(shards))) as pool:
            reports = list(pool.map(task, range(len(shards))))
    else:
        reports = [task(cid) for cid in range(len(shards))]
    return sorted(reports, key=lambda r: r.client_id)


def run_federation(split: FederatedSplit, round_config: RoundConfig,
                   model_config: Optional[TrainConfig] = None,
                   first_round_reports: Optional[list] = None) -> FederationResult:
    """Run ``round_config.n_rounds`` rounds and return the final global model.

    ``model_config`` seeds the global model's initialization (defaults to the
    global training config). ``first_round_reports`` lets callers reuse
    round-one client reports, which do not depend on the strategy. Reports
    are consumed in client_id order, so thread completion order is irrelevant.
    """
    shards = prepare_shards(split, round_config)
    strategy = round_config.strategy
    model_config = model_config or round_config.global_train
    ref = shards[0]
    global_model = build_model(ref.input_dim, ref.n_classes, model_config, round_config.hidden_widths)

    rounds = []
    train_seconds = 0.0
    for rnd in range(round_config.n_rounds):
        t0 = time.monotonic()
        if rnd == 0 and first_round_reports is not None:
            reports = sorted(first_round_reports, key=lambda r: r.client_id)
            # reused reports still count toward this run's training time
            train_seconds += sum(r.train_seconds for r in reports)
        else:
            init = None if rnd == 0 else global_model.get_weights()
            reports = train_clients(shards, round_config, rnd, init)

        live = [r for r in reports if not r.failed]
        if not live:
            raise FederationError(f"round {rnd}: every client failed")
        dyn = compute_dynamic_weights(live)
        agg = aggregate(live, strategy, dyn.betas, scale_first=round_config.dwfl_scale_first)
        global_model.set_weights(agg)

        fine_tuned = len(split.global_train) > 0
        history = []
        if fine_tuned:
            gcfg = replace(round_config.global_train,
                           seed=derive_seed(round_config.global_train.seed, 104729, rnd))
            outcome = train(global_model, split.global_train.features, split.global_train.labels_onehot,
                            gcfg, round_config.global_val_split)
            history = outcome.history
        train_seconds += time.monotonic() - t0
        rounds.append(RoundRecord(rnd, strategy.value, reports, dyn.betas, dyn.fallback,
                                  global_model.get_weights().checksum(), fine_tuned, history))
        logger.info("round %d (%s): betas=%s", rnd, strategy.value, [round(b, 4) for b in dyn.betas])
    return FederationResult(global_model, rounds, train_seconds)
