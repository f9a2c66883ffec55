"""FASTA ingestion and one-hot encoding of aligned sequences."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import AlignmentError, ConfigError, DataError

logger = logging.getLogger(__name__)

CANONICAL_AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
UNKNOWN_SYMBOL = "X"
GAP_SYMBOL = "-"


class Alphabet:
    """Ordered residue symbols with a symbol -> column lookup."""

    def __init__(self, symbols: Iterable[str]):
        symbols = tuple(symbols)
        if not symbols:
            raise ConfigError("alphabet is empty")
        for s in symbols:
            if not isinstance(s, str) or len(s) != 1:
                raise ConfigError(f"alphabet symbols must be single characters, got {s!r}")
        if len(set(symbols)) != len(symbols):
            raise ConfigError(f"alphabet has duplicate symbols: {''.join(symbols)}")
        self.symbols = symbols
        self.index = {s: i for i, s in enumerate(symbols)}

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, symbol):
        return symbol in self.index

    def __eq__(self, other):
        return isinstance(other, Alphabet) and self.symbols == other.symbols

    def __hash__(self):
        return hash(self.symbols)

    def __repr__(self):
        return f"Alphabet({''.join(self.symbols)!r})"

    @classmethod
    def default(cls) -> "Alphabet":
        return cls(CANONICAL_AMINO_ACIDS + UNKNOWN_SYMBOL + GAP_SYMBOL)

    @classmethod
    def from_records(cls, records: Iterable["SequenceRecord"]) -> "Alphabet":
        """Alphabet of the symbols actually observed, sorted."""
        seen = set()
        for r in records:
            seen.update(r.residues)
        return cls(sorted(seen))


@dataclass
class SequenceRecord:
    id: str
    host_label: str
    residues: str

    def __post_init__(self):
        if not self.residues:
            raise DataError(f"record {self.id!r} has an empty sequence")


@dataclass
class EncodedDataset:
    features: np.ndarray
    labels_onehot: np.ndarray
    class_names: list
    seq_len: int
    alphabet: Alphabet
    sample_ids: list = field(default_factory=list)

    def __post_init__(self):
        if self.features.shape[0] != self.labels_onehot.shape[0]:
            raise DataError("features and labels have different row counts")
        if self.labels_onehot.shape[1] != len(self.class_names):
            raise DataError("label width does not match the class catalog")
        if not self.sample_ids:
            self.sample_ids = [str(i) for i in range(self.features.shape[0])]
        if len(self.sample_ids) != self.features.shape[0]:
            raise DataError("sample_ids length does not match the row count")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def label_indices(self) -> np.ndarray:
        return np.argmax(self.labels_onehot, axis=1)

    def class_counts(self) -> np.ndarray:
        return self.labels_onehot.sum(axis=0).astype(int)

    def subset(self, indices) -> "EncodedDataset":
        idx = np.asarray(indices, dtype=int)
        return EncodedDataset(
            features=self.features[idx],
            labels_onehot=self.labels_onehot[idx],
            class_names=list(self.class_names),
            seq_len=self.seq_len,
            alphabet=self.alphabet,
            sample_ids=[self.sample_ids[i] for i in idx],
        )

    def with_labels(self, labels_onehot: np.ndarray) -> "EncodedDataset":
        return EncodedDataset(self.features, labels_onehot, list(self.class_names),
                              self.seq_len, self.alphabet, list(self.sample_ids))


def read_fasta(handle) -> Iterator[tuple]:
    """Yield ``(description, sequence)`` pairs; wrapped sequence lines are joined."""
    header = None
    chunks = []
    for line in handle:
        line = line.rstrip("\r\n")
        if line.startswith(">"):
            if header is not None:
                yield header, "".join(chunks)
            header = line[1:].strip()
            chunks = []
        elif header is not None:
            chunks.append("".join(line.split()))
        elif line.strip():
            raise DataError(f"sequence data before the first '>' line: {line[:40]!r}")
    if header is not None:
        yield header, "".join(chunks)


def normalize_residues(residues: str, alphabet: Optional[Alphabet]) -> tuple:
    """Uppercase and map out-of-alphabet characters to 'X'; returns (residues, n_replaced)."""
    residues = residues.upper()
    if alphabet is None:
        return residues, 0
    if UNKNOWN_SYMBOL not in alphabet:
        return residues, 0
    out = []
    replaced = 0
    for ch in residues:
        if ch in alphabet:
            out.append(ch)
        else:
            out.append(UNKNOWN_SYMBOL)
            replaced += 1
    return "".join(out), replaced


def read_manifest(path) -> list:
    """Parse ``label<TAB>path`` lines; relative paths resolve against the manifest."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise DataError(f"{path}:{lineno}: expected 'label<TAB>path', got {line!r}")
        label, fasta = parts[0].strip(), Path(parts[1].strip())
        if not fasta.is_absolute():
            fasta = path.parent / fasta
        pairs.append((fasta, label))
    return pairs


def parse_fasta_corpus(paths: Sequence[tuple], alphabet: Optional[Alphabet] = None) -> list:
    """Read one FASTA file per host label.

    ``paths`` holds ``(file path, host_label)`` pairs. With ``alphabet`` given,
    characters outside it become 'X'; pass None to keep every symbol (for the
    derive-from-data alphabet mode).
    """
    records = []
    replaced_total = 0
    for fasta, label in paths:
        fasta = Path(fasta)
        try:
            handle = open(fasta, encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read FASTA file {fasta}: {exc}") from exc
        with handle:
            for header, seq in read_fasta(handle):
                residues, replaced = normalize_residues(seq, alphabet)
                replaced_total += replaced
                rec_id = header.split()[0] if header.split() else f"{label}_{len(records)}"
                records.append(SequenceRecord(rec_id, label, residues))
    if replaced_total:
        logger.warning("mapped %d out-of-alphabet characters to %r", replaced_total, UNKNOWN_SYMBOL)
    if not records:
        raise DataError("corpus contains no FASTA records")
    return records


def one_hot_encode(records: Sequence[SequenceRecord], alphabet: Alphabet) -> EncodedDataset:
    if not records:
        raise DataError("no records to encode")
    seq_len = len(records[0].residues)
    offending = [r.id for r in records if len(r.residues) != seq_len]
    if offending:
        shown = ", ".join(offending[:10])
        raise AlignmentError(
            f"{len(offending)} sequence(s) differ from aligned length {seq_len}: {shown}", offending)
    class_names = sorted({r.host_label for r in records})
    if len(class_names) < 2:
        raise DataError(f"need at least 2 distinct labels, got {class_names}")
    class_index = {c: i for i, c in enumerate(class_names)}

    n, width = len(records), len(alphabet)
    codes = np.empty((n, seq_len), dtype=np.int64)
    for row, r in enumerate(records):
        try:
            codes[row] = [alphabet.index[ch] for ch in r.residues]
        except KeyError as exc:
            raise DataError(f"record {r.id!r} has symbol {exc.args[0]!r} outside the alphabet") from None
    features = np.zeros((n, seq_len * width))
    cols = codes + np.arange(seq_len) * width
    features[np.arange(n)[:, None], cols] = 1.0
    labels = np.zeros((n, len(class_names)))
    labels[np.arange(n), [class_index[r.host_label] for r in records]] = 1.0
    return EncodedDataset(features, labels, class_names, seq_len, alphabet, [r.id for r in records])


def decode(feature_row: np.ndarray, alphabet: Alphabet, seq_len: int) -> str:
    blocks = np.asarray(feature_row).reshape(seq_len, len(alphabet))
    return "".join(alphabet.symbols[i] for i in np.argmax(blocks, axis=1))


def write_fasta(path, records: Iterable[SequenceRecord], width: int = 60) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f">{r.id}\n")
            for i in range(0, len(r.residues), width):
                fh.write(r.residues[i:i + width] + "\n")
