"""Classification metrics and multi-run aggregation."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, MetricError

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("accuracy", "precision_weighted", "recall_weighted", "f1_weighted",
                 "f1_macro", "roc_auc_macro_ovr")
CSV_COLUMNS = ("run",) + METRIC_FIELDS + ("train_seconds",)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape:
        raise DataError(f"y_true and y_pred lengths differ: {y_true.shape} vs {y_pred.shape}")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise DataError(f"{name} has class indices outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def classification_metrics(cm) -> dict:
    """Accuracy plus weighted and macro precision/recall/F1 from a confusion matrix.

    Undefined ratios (0/0) count as 0. Weighted averages use true-class support.
    """
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise DataError(f"confusion matrix must be square, got {cm.shape}")
    if np.any(cm < 0):
        raise DataError("confusion matrix has negative counts")
    total = cm.sum()
    if total == 0:
        raise DataError("confusion matrix is empty")
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = _safe_ratio(tp, predicted)
    recall = _safe_ratio(tp, support)
    f1 = _safe_ratio(2 * precision * recall, precision + recall)
    n_undefined = int(np.sum(predicted == 0) + np.sum(support == 0))
    if n_undefined:
        logger.debug("%d per-class precision/recall values were 0/0 and set to 0", n_undefined)
    w = support / total
    return {
        "accuracy": float(tp.sum() / total),
        "precision_weighted": float(np.sum(w * precision)),
        # support-weighted recall collapses to sum(tp) / total; computed that way it equals accuracy exactly
        "recall_weighted": float(tp.sum() / total),
        "f1_weighted": float(np.sum(w * f1)),
        "precision_macro": float(precision.mean()),
        "recall_macro": float(recall.mean()),
        "f1_macro": float(f1.mean()),
    }


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks give ties half credit
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc_macro_ovr(probs, y_true) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=int)
    if probs.ndim != 2 or probs.shape[0] != len(y_true):
        raise DataError(f"probs {probs.shape} do not match {len(y_true)} labels")
    aucs = []
    for k in range(probs.shape[1]):
        positive = y_true == k
        if positive.all() or not positive.any():
            logger.warning("class %d lacks positives or negatives; skipped in macro AUC", k)
            continue
        aucs.append(binary_auc(probs[:, k], positive))
    if not aucs:
        raise MetricError("no class has both positive and negative samples")
    return float(np.mean(aucs))


def score_predictions(probs, y_true, n_classes: int) -> dict:
    """Every metric for one run; predictions are the argmax (lowest index wins ties)."""
    probs = np.asarray(probs, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=int)
    cm = confusion_matrix(y_true, np.argmax(probs, axis=1), n_classes)
    m = classification_metrics(cm)
    m["roc_auc_macro_ovr"] = roc_auc_macro_ovr(probs, y_true)
    return m


@dataclass
class RunMetrics:
    seed: int
    accuracy: float
    precision_weighted: float
    recall_weighted: float
    f1_weighted: float
    f1_macro: float
    roc_auc_macro_ovr: float
    train_seconds: float
    precision_macro: float = 0.0
    recall_macro: float = 0.0


@dataclass
class MetricsReport:
    accuracy: float
    precision_weighted: float
    recall_weighted: float
    f1_weighted: float
    f1_macro: float
    roc_auc_macro_ovr: float
    train_seconds: float
    n_runs: int
    per_run: list = field(default_factory=list)
    failed_seeds: list = field(default_factory=list)

    @classmethod
    def from_runs(cls, runs: Sequence[RunMetrics], failed_seeds=()) -> "MetricsReport":
        if not runs:
            raise MetricError("no completed runs to aggregate")
        mean = {f: float(np.mean([getattr(r, f) for r in runs])) for f in METRIC_FIELDS + ("train_seconds",)}
        return cls(**mean, n_runs=len(runs), per_run=list(runs), failed_seeds=list(failed_seeds))

    def to_csv(self, path) -> None:
        """One row per run, then a ``mean`` row. train_seconds is the only timing column."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.per_run:
                w.writerow([f"seed{r.seed}"] + [_fmt(getattr(r, f)) for f in METRIC_FIELDS]
                           + [f"{r.train_seconds:.4f}"])
            w.writerow(["mean"] + [_fmt(getattr(self, f)) for f in METRIC_FIELDS]
                       + [f"{self.train_seconds:.4f}"])

    def to_records(self, path, label: str = "") -> None:
        with open(path, "w") as fh:
            for r in self.per_run:
                fh.write(json.dumps({"type": "run", "label": label, **asdict(r)}, sort_keys=True) + "\n")
            agg = {f: getattr(self, f) for f in METRIC_FIELDS + ("train_seconds", "n_runs")}
            fh.write(json.dumps({"type": "aggregate", "label": label, **agg,
                                 "failed_seeds": self.failed_seeds}, sort_keys=True) + "\n")


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def evaluate_runs(experiment: Callable, seeds: Sequence[int]) -> MetricsReport:
    """Run ``experiment(seed)`` per seed and average the metrics.

    The callable returns ``(model, test_set)`` or ``(model, test_set,
    train_seconds)``; without the third element the whole call is timed. A
    seed whose run raises is recorded as failed and left out of the mean.
    """
    from .nn import predict_proba

    if not seeds:
        raise MetricError("evaluate_runs needs at least one seed")
    runs, failed = [], []
    for seed in seeds:
        t0 = time.monotonic()
        try:
            out = experiment(seed)
            elapsed = time.monotonic() - t0
            model, test = out[0], out[1]
            train_seconds = float(out[2]) if len(out) > 2 else elapsed
            probs = predict_proba(model, test.features)
            m = score_predictions(probs, test.label_indices(), test.n_classes)
        except Exception as exc:  # one bad seed must not sink the whole report
            logger.warning("run with seed %s failed: %s", seed, exc)
            failed.append(seed)
            continue
        runs.append(RunMetrics(seed=seed, train_seconds=train_seconds, **m))
    if failed:
        logger.warning("%d of %d runs failed; aggregating over %d", len(failed), len(seeds), len(runs))
    return MetricsReport.from_runs(runs, failed)
