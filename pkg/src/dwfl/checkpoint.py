"""Versioned binary container for model weights and encoded datasets.

Layout::

    magic (8 bytes) | format version (u32 LE) | header length (u32 LE)
    header (UTF-8 JSON) | entry count (u32 LE) | entries...

Each entry is ``layer_index (u32) | role tag (u8) | ndim (u8) | dims (u64 * ndim)``
followed by the values as little-endian float64.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError
from .nn import PARAM_ROLES, LayerSpec, Model, ModelWeights, WeightEntry

WEIGHTS_MAGIC = b"DWFLWGT\x00"
DATASET_MAGIC = b"DWFLDAT\x00"
FORMAT_VERSION = 1

# dataset bodies reuse the entry framing with these pseudo roles
_DATASET_ROLES = ("features", "labels_onehot")
_ROLE_TAGS = {role: i for i, role in enumerate(PARAM_ROLES + _DATASET_ROLES)}
_TAG_ROLES = {i: role for role, i in _ROLE_TAGS.items()}


def _write_container(path, magic: bytes, header: dict, entries) -> None:
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(entries)))
        for layer_index, role, values in entries:
            values = np.ascontiguousarray(values, dtype="<f8")
            fh.write(struct.pack("<IBB", layer_index, _ROLE_TAGS[role], values.ndim))
            fh.write(struct.pack(f"<{values.ndim}Q", *values.shape))
            fh.write(values.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated container while reading {what}")
    return data


def _read_container(path, magic: bytes):
    with open(path, "rb") as fh:
        got = fh.read(len(magic))
        if got != magic:
            raise CheckpointError(f"{path}: bad magic {got!r}, expected {magic!r}")
        version, header_len = struct.unpack("<II", _read_exact(fh, 8, "preamble"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        header = json.loads(_read_exact(fh, header_len, "header").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
        entries = []
        for _ in range(count):
            layer_index, tag, ndim = struct.unpack("<IBB", _read_exact(fh, 6, "entry head"))
            if tag not in _TAG_ROLES:
                raise CheckpointError(f"{path}: unknown role tag {tag}")
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, "entry shape"))
            size = int(np.prod(shape)) if ndim else 1
            raw = _read_exact(fh, 8 * size, "entry values")
            values = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            entries.append((layer_index, _TAG_ROLES[tag], values))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last entry")
    return header, entries


def _spec_to_dict(spec: LayerSpec) -> dict:
    return {"kind": spec.kind, "input_dim": spec.input_dim, "output_dim": spec.output_dim,
            "dropout_rate": spec.dropout_rate, "l1_coeff": spec.l1_coeff}


def save_weights(path, model: Model, weights: ModelWeights | None = None, metadata: dict | None = None) -> None:
    weights = weights if weights is not None else model.get_weights()
    model.get_weights().check_compatible(weights)
    header = {
        "kind": "model_weights",
        "input_dim": model.input_dim,
        "num_classes": model.num_classes,
        "layers": [_spec_to_dict(s) for s in model.specs],
        "metadata": metadata or {},
    }
    _write_container(path, WEIGHTS_MAGIC, header,
                     [(e.layer_index, e.role, e.values) for e in weights.entries])


def read_weights(path) -> tuple:
    """Return ``(header, ModelWeights)`` without building a model."""
    header, entries = _read_container(path, WEIGHTS_MAGIC)
    for _, role, _ in entries:
        if role not in PARAM_ROLES:
            raise CheckpointError(f"{path}: role {role!r} does not belong in a weight checkpoint")
    return header, ModelWeights([WeightEntry(i, r, v) for i, r, v in entries])


def load_model(path, expect_input_dim: int | None = None, expect_num_classes: int | None = None) -> Model:
    """Rebuild the model described by a checkpoint and install its weights.

    The stored entries must match the stored layer list exactly; optional
    expectations guard against loading a model for the wrong dataset.
    """
    header, weights = read_weights(path)
    try:
        specs = [LayerSpec(**d) for d in header["layers"]]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed layer list: {exc}") from exc
    model = Model(specs)
    if model.input_dim != header["input_dim"] or model.num_classes != header["num_classes"]:
        raise CheckpointError(f"{path}: header dims disagree with layer list")
    if expect_input_dim is not None and model.input_dim != expect_input_dim:
        raise CheckpointError(f"{path}: input_dim {model.input_dim} != expected {expect_input_dim}")
    if expect_num_classes is not None and model.num_classes != expect_num_classes:
        raise CheckpointError(f"{path}: num_classes {model.num_classes} != expected {expect_num_classes}")
    try:
        model.set_weights(weights)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model


def save_dataset(path, ds) -> None:
    header = {
        "kind": "encoded_dataset",
        "seq_len": ds.seq_len,
        "alphabet": list(ds.alphabet.symbols),
        "class_names": list(ds.class_names),
        "sample_ids": list(ds.sample_ids),
    }
    _write_container(path, DATASET_MAGIC, header,
                     [(0, "features", ds.features), (0, "labels_onehot", ds.labels_onehot)])


def load_dataset(path):
    from .encoding import Alphabet, EncodedDataset

    header, entries = _read_container(path, DATASET_MAGIC)
    arrays = {role: values for _, role, values in entries}
    if set(arrays) != set(_DATASET_ROLES):
        raise CheckpointError(f"{path}: expected features and labels_onehot entries")
    return EncodedDataset(
        features=arrays["features"],
        labels_onehot=arrays["labels_onehot"],
        class_names=list(header["class_names"]),
        seq_len=int(header["seq_len"]),
        alphabet=Alphabet(header["alphabet"]),
        sample_ids=list(header["sample_ids"]),
    )
