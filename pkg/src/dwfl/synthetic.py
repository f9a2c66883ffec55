"""Desk-scale stand-in for an aligned host-labelled protein corpus.

Each class owns a template sequence. A sample of class ``c`` copies the
template of ``c`` with probability ``separability`` (otherwise the template of
a uniformly drawn class), then resamples every position uniformly with
probability ``1 - separability``. At separability 1 classes are fixed,
distinct sequences; at 0 the label carries no information.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoding import CANONICAL_AMINO_ACIDS, Alphabet, EncodedDataset, SequenceRecord, one_hot_encode
from .errors import ConfigError


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 2000
    n_classes: int = 4
    seq_len: int = 50
    alphabet_size: int = 20
    separability: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.n_samples < self.n_classes:
            raise ConfigError("n_samples must be at least n_classes")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be >= 1")
        if not 2 <= self.alphabet_size <= len(CANONICAL_AMINO_ACIDS):
            raise ConfigError(f"alphabet_size must lie in [2, {len(CANONICAL_AMINO_ACIDS)}]")
        if not 0.0 <= self.separability <= 1.0:
            raise ConfigError("separability must lie in [0, 1]")
        if self.alphabet_size ** self.seq_len < self.n_classes:
            raise ConfigError("too few distinct sequences for the requested class count")

    @property
    def alphabet(self) -> Alphabet:
        return Alphabet(CANONICAL_AMINO_ACIDS[: self.alphabet_size])

    def class_names(self) -> list:
        digits = len(str(self.n_classes - 1))
        return [f"class_{k:0{digits}d}" for k in range(self.n_classes)]


def _templates(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    while True:
        t = rng.integers(0, spec.alphabet_size, size=(spec.n_classes, spec.seq_len))
        if len({row.tobytes() for row in t}) == spec.n_classes:
            return t


def generate_synthetic_records(spec: SyntheticSpec) -> list:
    rng = np.random.default_rng(spec.seed)
    templates = _templates(spec, rng)
    names = spec.class_names()
    labels = rng.permutation(np.arange(spec.n_samples) % spec.n_classes)
    keep_class = rng.random(spec.n_samples) < spec.separability
    source = np.where(keep_class, labels, rng.integers(0, spec.n_classes, spec.n_samples))
    codes = templates[source]
    resample = rng.random(codes.shape) >= spec.separability
    codes = np.where(resample, rng.integers(0, spec.alphabet_size, codes.shape), codes)
    symbols = np.array(spec.alphabet.symbols)
    width = len(str(spec.n_samples - 1))
    return [SequenceRecord(f"syn_{i:0{width}d}", names[labels[i]], "".join(symbols[codes[i]]))
            for i in range(spec.n_samples)]


def generate_synthetic(spec: SyntheticSpec) -> EncodedDataset:
    return one_hot_encode(generate_synthetic_records(spec), spec.alphabet)
