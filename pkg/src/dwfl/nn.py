"""Dense feed-forward network engine written directly against numpy.

The layer stack is fixed: five blocks of Dense(+L1) -> BatchNorm -> Dropout
with widths 512, 256, 128, 64, 32, then an output Dense with a softmax head.
Everything runs in float64 so finite-difference checks stay meaningful.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, DivergenceError, ShapeError, UsageError

logger = logging.getLogger(__name__)

LAYER_KINDS = ("dense", "batch_norm", "dropout")
PARAM_ROLES = ("kernel", "bias", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var")
TRAINABLE_ROLES = ("kernel", "bias", "bn_gamma", "bn_beta")

DEFAULT_HIDDEN_WIDTHS = (512, 256, 128, 64, 32)
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    input_dim: int
    output_dim: int
    dropout_rate: float = 0.0
    l1_coeff: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError(f"layer dimensions must be >= 1, got {self.input_dim}->{self.output_dim}")
        if self.kind != "dense" and self.input_dim != self.output_dim:
            raise ConfigError(f"{self.kind} layer must preserve dimension")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.l1_coeff < 0:
            raise ConfigError("l1_coeff must be nonnegative")

    @property
    def parameter_count(self) -> int:
        if self.kind == "dense":
            return self.input_dim * self.output_dim + self.output_dim
        if self.kind == "batch_norm":
            return 4 * self.output_dim
        return 0

    @property
    def trainable_parameter_count(self) -> int:
        if self.kind == "batch_norm":
            return 2 * self.output_dim
        return self.parameter_count


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    l1_coeff: float = 1e-5
    dropout_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be nonnegative")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if not self.adam_epsilon > 0:
            raise ConfigError("adam_epsilon must be positive")
        if self.l1_coeff < 0:
            raise ConfigError("l1_coeff must be nonnegative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")


@dataclass
class WeightEntry:
    layer_index: int
    role: str
    values: np.ndarray

    @property
    def shape(self) -> tuple:
        return tuple(self.values.shape)


@dataclass
class ModelWeights:
    """Ordered parameter arrays; the unit that clients and the server exchange."""

    entries: list

    def signature(self) -> list:
        return [(e.layer_index, e.role, e.shape) for e in self.entries]

    def check_compatible(self, other: "ModelWeights") -> None:
        if len(self.entries) != len(other.entries):
            raise ShapeError(f"entry count differs: {len(self.entries)} vs {len(other.entries)}")
        for i, (a, b) in enumerate(zip(self.signature(), other.signature())):
            if a != b:
                raise ShapeError(f"entry {i} differs: {a} vs {b}")

    def copy(self) -> "ModelWeights":
        return ModelWeights([WeightEntry(e.layer_index, e.role, e.values.copy()) for e in self.entries])

    def parameter_count(self) -> int:
        return sum(e.values.size for e in self.entries)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(f"{e.layer_index}:{e.role}:{e.shape};".encode())
            h.update(np.ascontiguousarray(e.values, dtype="<f8").tobytes())
        return h.hexdigest()

    def __getitem__(self, key):
        layer_index, role = key
        for e in self.entries:
            if e.layer_index == layer_index and e.role == role:
                return e.values
        raise KeyError(key)


# Gradients share the container; they simply omit running statistics.
Gradients = ModelWeights


def model_layer_specs(input_dim: int, num_classes: int, config: TrainConfig,
                      hidden_widths: Sequence[int] = DEFAULT_HIDDEN_WIDTHS) -> list:
    if input_dim < 1:
        raise ConfigError(f"input_dim must be >= 1, got {input_dim}")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    specs = []
    prev = input_dim
    for width in hidden_widths:
        specs.append(LayerSpec("dense", prev, width, l1_coeff=config.l1_coeff))
        specs.append(LayerSpec("batch_norm", width, width))
        specs.append(LayerSpec("dropout", width, width, dropout_rate=config.dropout_rate))
        prev = width
    specs.append(LayerSpec("dense", prev, num_classes))
    return specs


class Model:
    """A stack of layers plus its parameter arrays.

    Not safe to mutate from several threads; inference on a model nobody is
    training is fine.
    """

    def __init__(self, specs: Sequence[LayerSpec]):
        specs = list(specs)
        if not specs or specs[-1].kind != "dense":
            raise ConfigError("the layer stack must end with a dense layer")
        for a, b in zip(specs, specs[1:]):
            if a.output_dim != b.input_dim:
                raise ConfigError(f"layer dims do not chain: {a} -> {b}")
        self.specs = specs
        self.params: dict = {}
        for i, spec in enumerate(specs):
            if spec.kind == "dense":
                self.params[(i, "kernel")] = np.zeros((spec.input_dim, spec.output_dim))
                self.params[(i, "bias")] = np.zeros(spec.output_dim)
            elif spec.kind == "batch_norm":
                d = spec.output_dim
                self.params[(i, "bn_gamma")] = np.ones(d)
                self.params[(i, "bn_beta")] = np.zeros(d)
                self.params[(i, "bn_running_mean")] = np.zeros(d)
                self.params[(i, "bn_running_var")] = np.ones(d)
        # bumped on every parameter mutation so stale caches can be detected
        self.version = 0

    @property
    def input_dim(self) -> int:
        return self.specs[0].input_dim

    @property
    def num_classes(self) -> int:
        return self.specs[-1].output_dim

    def parameter_count(self) -> int:
        return sum(s.parameter_count for s in self.specs)

    def trainable_parameter_count(self) -> int:
        return sum(s.trainable_parameter_count for s in self.specs)

    def initialize(self, seed: int) -> None:
        """Glorot-uniform kernels, zero biases, identity batch norm."""
        rng = np.random.default_rng(seed)
        for i, spec in enumerate(self.specs):
            if spec.kind == "dense":
                limit = math.sqrt(6.0 / (spec.input_dim + spec.output_dim))
                self.params[(i, "kernel")] = rng.uniform(-limit, limit, (spec.input_dim, spec.output_dim))
                self.params[(i, "bias")] = np.zeros(spec.output_dim)
            elif spec.kind == "batch_norm":
                d = spec.output_dim
                self.params[(i, "bn_gamma")] = np.ones(d)
                self.params[(i, "bn_beta")] = np.zeros(d)
                self.params[(i, "bn_running_mean")] = np.zeros(d)
                self.params[(i, "bn_running_var")] = np.ones(d)
        self.version += 1

    def get_weights(self) -> ModelWeights:
        return ModelWeights([WeightEntry(i, role, v.copy()) for (i, role), v in self.params.items()])

    def set_weights(self, weights: ModelWeights) -> None:
        self.get_weights().check_compatible(weights)
        for e in weights.entries:
            if e.role == "bn_running_var" and np.any(e.values <= 0):
                raise ShapeError(f"bn_running_var of layer {e.layer_index} must be strictly positive")
            self.params[(e.layer_index, e.role)] = np.array(e.values, dtype=np.float64, copy=True)
        self.version += 1


def build_model(input_dim: int, num_classes: int, config: TrainConfig,
                hidden_widths: Sequence[int] = DEFAULT_HIDDEN_WIDTHS) -> Model:
    model = Model(model_layer_specs(input_dim, num_classes, config, hidden_widths))
    model.initialize(config.seed)
    return model


@dataclass
class ForwardCache:
    mode: str
    version: int
    inputs: list
    probs: np.ndarray
    masks: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: Model, x: np.ndarray, mode: str = "infer",
            rng: Optional[np.random.Generator] = None) -> tuple:
    """Run the stack on a batch; returns ``(probs, cache)``.

    Train mode uses batch statistics for batch norm (and folds them into the
    running statistics) and applies inverted dropout drawn from ``rng``.
    """
    if mode not in ("train", "infer"):
        raise UsageError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"expected input of shape (n, {model.input_dim}), got {x.shape}")
    train = mode == "train"
    inputs, masks, bn = [], {}, {}
    h = x
    for i, spec in enumerate(model.specs):
        inputs.append(h)
        if spec.kind == "dense":
            h = h @ model.params[(i, "kernel")] + model.params[(i, "bias")]
        elif spec.kind == "batch_norm":
            gamma = model.params[(i, "bn_gamma")]
            beta = model.params[(i, "bn_beta")]
            if train:
                mu = h.mean(axis=0)
                var = h.var(axis=0)
                inv_std = 1.0 / np.sqrt(var + BN_EPSILON)
                xhat = (h - mu) * inv_std
                bn[i] = (xhat, inv_std)
                rm = model.params[(i, "bn_running_mean")]
                rv = model.params[(i, "bn_running_var")]
                model.params[(i, "bn_running_mean")] = BN_MOMENTUM * rm + (1 - BN_MOMENTUM) * mu
                model.params[(i, "bn_running_var")] = BN_MOMENTUM * rv + (1 - BN_MOMENTUM) * var
            else:
                rm = model.params[(i, "bn_running_mean")]
                rv = model.params[(i, "bn_running_var")]
                xhat = (h - rm) / np.sqrt(rv + BN_EPSILON)
            h = gamma * xhat + beta
        else:
            if train and spec.dropout_rate > 0:
                if rng is None:
                    raise UsageError("train-mode dropout needs an rng")
                keep = 1.0 - spec.dropout_rate
                mask = (rng.random(h.shape) < keep) / keep
                masks[i] = mask
                h = h * mask
    probs = softmax(h)
    return probs, ForwardCache(mode, model.version, inputs, probs, masks, bn)


def predict_proba(model: Model, x: np.ndarray) -> np.ndarray:
    return forward(model, x, "infer")[0]


def penultimate_activations(model: Model, x: np.ndarray) -> np.ndarray:
    """Inference-mode input to the output dense layer."""
    _, cache = forward(model, x, "infer")
    return cache.inputs[len(model.specs) - 1]


def l1_penalty(model: Model) -> float:
    total = 0.0
    for i, spec in enumerate(model.specs):
        if spec.kind == "dense" and spec.l1_coeff > 0:
            total += spec.l1_coeff * float(np.abs(model.params[(i, "kernel")]).sum())
    return total


def loss(probs: np.ndarray, y_onehot: np.ndarray, model: Optional[Model] = None) -> float:
    """Mean categorical cross-entropy plus the L1 penalty on dense kernels."""
    probs = np.asarray(probs, dtype=np.float64)
    y_onehot = np.asarray(y_onehot, dtype=np.float64)
    if probs.shape != y_onehot.shape:
        raise ShapeError(f"probs {probs.shape} and labels {y_onehot.shape} differ")
    clipped = np.clip(probs, PROB_FLOOR, 1.0)
    ce = -float(np.sum(y_onehot * np.log(clipped))) / probs.shape[0]
    # -0.0 -> 0.0 for the perfect-prediction case
    ce = max(ce, 0.0)
    return ce + (l1_penalty(model) if model is not None else 0.0)


def backward(model: Model, cache: ForwardCache, y_onehot: np.ndarray) -> Gradients:
    if cache.mode != "train":
        raise UsageError("backward needs a train-mode forward cache")
    if cache.version != model.version:
        raise UsageError("forward cache is stale: model parameters changed since the forward pass")
    y_onehot = np.asarray(y_onehot, dtype=np.float64)
    if y_onehot.shape != cache.probs.shape:
        raise ShapeError(f"labels {y_onehot.shape} do not match probs {cache.probs.shape}")
    n = y_onehot.shape[0]
    grads = {}
    d = (cache.probs - y_onehot) / n
    for i in range(len(model.specs) - 1, -1, -1):
        spec = model.specs[i]
        h_in = cache.inputs[i]
        if spec.kind == "dense":
            w = model.params[(i, "kernel")]
            gw = h_in.T @ d
            if spec.l1_coeff > 0:
                gw += spec.l1_coeff * np.sign(w)
            grads[(i, "kernel")] = gw
            grads[(i, "bias")] = d.sum(axis=0)
            if i > 0:
                d = d @ w.T
        elif spec.kind == "batch_norm":
            xhat, inv_std = cache.bn[i]
            gamma = model.params[(i, "bn_gamma")]
            grads[(i, "bn_gamma")] = (d * xhat).sum(axis=0)
            grads[(i, "bn_beta")] = d.sum(axis=0)
            dxhat = d * gamma
            m = dxhat.shape[0]
            d = (inv_std / m) * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            mask = cache.masks.get(i)
            if mask is not None:
                d = d * mask
    entries = [WeightEntry(i, role, grads[(i, role)])
               for (i, role) in model.params if role in TRAINABLE_ROLES]
    return ModelWeights(entries)


class AdamState:
    """First/second moment buffers keyed like the trainable parameters."""

    def __init__(self, model: Model, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = {k: np.zeros_like(v) for k, v in model.params.items() if k[1] in TRAINABLE_ROLES}
        self.v = {k: np.zeros_like(v) for k, v in self.m.items()}

    @classmethod
    def from_config(cls, model: Model, config: TrainConfig) -> "AdamState":
        return cls(model, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon)


def adam_step(model: Model, grads: Gradients, opt_state: AdamState, t: int) -> None:
    if t < 1:
        raise UsageError("Adam step counter starts at 1")
    b1, b2 = opt_state.beta1, opt_state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for e in grads.entries:
        key = (e.layer_index, e.role)
        if key not in opt_state.m or opt_state.m[key].shape != e.values.shape:
            raise ShapeError(f"gradient entry {key} {e.shape} does not match optimizer state")
        g = e.values
        m, v = opt_state.m[key], opt_state.v[key]
        # in place: these arrays are large for the first dense layer
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        denom = np.sqrt(v / c2)
        denom += opt_state.epsilon
        np.divide(m, denom, out=denom)
        denom *= opt_state.learning_rate / c1
        model.params[key] -= denom
    model.version += 1


@dataclass
class EpochStats:
    loss: float
    accuracy: float


@dataclass
class TrainOutcome:
    val_accuracy: float
    history: list
    n_train: int
    n_val: int
    degenerate: bool = False


def held_out_count(n: int, val_split: float) -> int:
    # small slack so that e.g. 100 * 0.1 or 30 * 0.7 floor to the intended integer
    return int(math.floor(n * val_split + 1e-9))


def _batches(indices: np.ndarray, batch_size: int):
    starts = list(range(0, len(indices), batch_size))
    # fold a trailing singleton into the previous batch; batch norm cannot use one row
    if len(starts) > 1 and len(indices) - starts[-1] == 1:
        starts.pop()
    for k, s in enumerate(starts):
        end = starts[k + 1] if k + 1 < len(starts) else len(indices)
        yield indices[s:end]


def accuracy(probs: np.ndarray, y_onehot: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.argmax(y_onehot, axis=1)))


def train(model: Model, x: np.ndarray, y_onehot: np.ndarray, config: TrainConfig,
          val_split: float = 0.1) -> TrainOutcome:
    """Mini-batch Adam on a seeded shuffle; the tail ``val_split`` is held out."""
    x = np.asarray(x, dtype=np.float64)
    y_onehot = np.asarray(y_onehot, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise DataError("cannot train on an empty dataset")
    if y_onehot.shape[0] != n:
        raise ShapeError(f"x has {n} rows but labels have {y_onehot.shape[0]}")
    if not 0.0 <= val_split < 1.0:
        raise ConfigError(f"val_split must lie in [0, 1), got {val_split}")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(n)
    n_val = held_out_count(n, val_split)
    train_idx, val_idx = order[: n - n_val], order[n - n_val:]
    if len(train_idx) == 0:
        raise DataError("validation split leaves no training rows")

    opt = AdamState.from_config(model, config)
    history = []
    t = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(train_idx)
        total_loss = 0.0
        correct = 0
        for batch in _batches(perm, config.batch_size):
            xb, yb = x[batch], y_onehot[batch]
            probs, cache = forward(model, xb, "train", rng)
            batch_loss = loss(probs, yb, model)
            if not math.isfinite(batch_loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            grads = backward(model, cache, yb)
            t += 1
            adam_step(model, grads, opt, t)
            total_loss += batch_loss * len(batch)
            correct += int(np.sum(np.argmax(probs, axis=1) == np.argmax(yb, axis=1)))
        history.append(EpochStats(total_loss / len(train_idx), correct / len(train_idx)))

    degenerate = n_val == 0
    eval_idx = train_idx if degenerate else val_idx
    if degenerate:
        logger.info("no held-out rows (n=%d, val_split=%s); reporting training accuracy", n, val_split)
    val_acc = accuracy(predict_proba(model, x[eval_idx]), y_onehot[eval_idx])
    return TrainOutcome(val_acc, history, len(train_idx), n_val, degenerate)
