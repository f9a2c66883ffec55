"""End-to-end experiment driver: data -> split -> federation -> metrics -> files."""

from __future__ import annotations

import contextlib
import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from .checkpoint import save_weights
from .config import ExperimentConfig
from .encoding import Alphabet, EncodedDataset, one_hot_encode, parse_fasta_corpus, read_manifest
from .errors import DWFLError, ShapeError
from .federation import (
    AggregationStrategy,
    FederationResult,
    RoundConfig,
    prepare_shards,
    run_federation,
    train_clients,
)
from .metrics import METRIC_FIELDS, MetricsReport, RunMetrics, score_predictions
from .nn import Model, penultimate_activations, predict_proba
from .partitioning import FederatedSplit, make_federated_split
from .synthetic import generate_synthetic

logger = logging.getLogger(__name__)


class StageError(DWFLError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except (DWFLError, OSError, ValueError) as exc:
        raise StageError(name, exc) from exc


def load_data(config: ExperimentConfig) -> EncodedDataset:
    if config.data.source == "synthetic":
        return generate_synthetic(config.synthetic)
    pairs = read_manifest(config.data.manifest)
    if config.data.alphabet_mode == "fixed":
        alphabet = Alphabet(config.data.alphabet)
        records = parse_fasta_corpus(pairs, alphabet)
    else:
        records = parse_fasta_corpus(pairs, None)
        alphabet = Alphabet.from_records(records)
        logger.info("derived alphabet of %d symbols: %s", len(alphabet), "".join(alphabet.symbols))
    return one_hot_encode(records, alphabet)


def round_config_for(config: ExperimentConfig, strategy, seed: int) -> RoundConfig:
    r = config.rounds
    return RoundConfig(
        n_rounds=r.n_rounds,
        strategy=AggregationStrategy.parse(strategy),
        client_train=replace(config.client_train, seed=seed),
        global_train=replace(config.global_train, seed=seed),
        val_split=r.val_split,
        global_val_split=r.global_val_split,
        dwfl_scale_first=r.dwfl_scale_first,
        poisoned_clients=tuple(r.poisoned_clients),
        poison_mode=r.poison_mode,
        hidden_widths=tuple(r.hidden_widths),
        client_init=r.client_init,
    )


def split_for(config: ExperimentConfig, ds: EncodedDataset, seed: int) -> FederatedSplit:
    return make_federated_split(ds, replace(config.split, seed=seed))


@dataclass
class RunResult:
    strategy: str
    seed: int
    split: FederatedSplit
    federation: FederationResult
    metrics: RunMetrics


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    dataset: EncodedDataset
    reports: dict = field(default_factory=dict)
    runs: dict = field(default_factory=dict)


def first_round_reports(config: ExperimentConfig, split: FederatedSplit, seed: int) -> list:
    """Round-one client reports; identical for every strategy under one seed."""
    rc = round_config_for(config, config.experiment.strategies[0], seed)
    return train_clients(prepare_shards(split, rc), rc, 0, None)


def run_one(config: ExperimentConfig, ds: EncodedDataset, strategy, seed: int,
            split: FederatedSplit | None = None, reports: list | None = None) -> RunResult:
    split = split or split_for(config, ds, seed)
    rc = round_config_for(config, strategy, seed)
    fed = run_federation(split, rc, first_round_reports=reports)
    probs = predict_proba(fed.global_model, split.test.features)
    m = score_predictions(probs, split.test.label_indices(), ds.n_classes)
    return RunResult(rc.strategy.value, seed, split, fed, RunMetrics(seed=seed, train_seconds=fed.train_seconds, **m))


def export_activations(model: Model, ds: EncodedDataset, path) -> None:
    """Penultimate-layer activations (inference mode) plus the class label, as CSV."""
    if ds.input_dim != model.input_dim:
        raise ShapeError(f"dataset width {ds.input_dim} does not match model input {model.input_dim}")
    acts = penultimate_activations(model, ds.features)
    labels = ds.label_indices()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"a{j}" for j in range(acts.shape[1])] + ["label"])
        for row, lab in zip(acts, labels):
            w.writerow([repr(float(v)) for v in row] + [ds.class_names[lab]])


def _write_summary(path, reports: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("strategy",) + METRIC_FIELDS + ("train_seconds", "n_runs"))
        for strategy, rep in reports.items():
            w.writerow([strategy] + [f"{getattr(rep, f):.6f}" for f in METRIC_FIELDS]
                       + [f"{rep.train_seconds:.4f}", rep.n_runs])


def run_experiment(config: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Every strategy x seed cell, with artifacts under ``experiment.output_dir``.

    Output names are fixed: ``metrics_<strategy>.csv`` / ``.jsonl``,
    ``rounds_<strategy>_seed<seed>.jsonl``, ``weights_<strategy>_seed<seed>.ckpt``,
    ``split_seed<seed>.tsv``, ``checksums.tsv``, ``summary.csv``, ``metadata.json``.
    """
    with stage("validate config"):
        config.validate()
    with stage("load data"):
        ds = load_data(config)
    out = Path(config.experiment.output_dir)
    if write:
        with stage("prepare output"):
            out.mkdir(parents=True, exist_ok=True)

    result = ExperimentResult(config, ds)
    splits = {}
    with stage("split data"):
        for seed in config.experiment.seeds:
            splits[seed] = split_for(config, ds, seed)
            if write:
                splits[seed].export_provenance(out / f"split_seed{seed}.tsv")

    shared_reports = {}
    if len(config.experiment.strategies) > 1:
        for seed in config.experiment.seeds:
            with stage(f"client training seed {seed}"):
                shared_reports[seed] = first_round_reports(config, splits[seed], seed)

    checksums = []
    for tag in config.experiment.strategies:
        strategy = AggregationStrategy.parse(tag).value
        runs = []
        for seed in config.experiment.seeds:
            with stage(f"federation {strategy} seed {seed}"):
                run = run_one(config, ds, strategy, seed, splits[seed], shared_reports.get(seed))
            result.runs[(strategy, seed)] = run
            runs.append(run.metrics)
            checksum = run.federation.global_model.get_weights().checksum()
            checksums.append((strategy, seed, checksum))
            if write:
                with stage("write artifacts"):
                    run.federation.export_round_log(out / f"rounds_{strategy}_seed{seed}.jsonl")
                    save_weights(out / f"weights_{strategy}_seed{seed}.ckpt", run.federation.global_model,
                                 metadata={"strategy": strategy, "seed": seed,
                                           "class_names": ds.class_names})
            logger.info("%s seed %d: accuracy %.4f", strategy, seed, run.metrics.accuracy)
        report = MetricsReport.from_runs(runs)
        result.reports[strategy] = report
        if write:
            with stage("write artifacts"):
                report.to_csv(out / f"metrics_{strategy}.csv")
                report.to_records(out / f"metrics_{strategy}.jsonl", label=strategy)

    if write:
        with stage("write artifacts"):
            _write_summary(out / "summary.csv", result.reports)
            with open(out / "checksums.tsv", "w") as fh:
                fh.write("strategy\tseed\tsha256\n")
                for strategy, seed, checksum in checksums:
                    fh.write(f"{strategy}\t{seed}\t{checksum}\n")
            meta = {
                "n_samples": len(ds),
                "input_dim": ds.input_dim,
                "seq_len": ds.seq_len,
                "alphabet": "".join(ds.alphabet.symbols),
                "class_names": ds.class_names,
                "shard_mode": config.split.shard_mode,
                "global_train_fraction": config.split.global_train_fraction,
                "global_fine_tune": config.split.global_train_fraction > 0,
                "timing_columns": ["train_seconds"],
            }
            (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return result
