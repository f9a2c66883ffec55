import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import finite_difference_grads, onehot
from dwfl.errors import ConfigError, DivergenceError, ShapeError, UsageError
from dwfl.nn import (
    BN_EPSILON,
    AdamState,
    LayerSpec,
    Model,
    TrainConfig,
    WeightEntry,
    ModelWeights,
    adam_step,
    backward,
    build_model,
    forward,
    held_out_count,
    loss,
    predict_proba,
    softmax,
    train,
)


# --- structure and counts ---------------------------------------------------

def test_first_dense_layer_count():
    assert LayerSpec("dense", 26754, 512).parameter_count == 13_698_560


def test_small_dense_count():
    assert LayerSpec("dense", 4, 512).parameter_count == 2560


def test_full_model_counts():
    model = build_model(26754, 22, TrainConfig(seed=0))
    dense = sum(s.parameter_count for s in model.specs if s.kind == "dense")
    bn_widths = sum(s.output_dim for s in model.specs if s.kind == "batch_norm")
    assert model.trainable_parameter_count() == dense + 2 * bn_widths == 13_875_830
    assert model.parameter_count() == dense + 4 * bn_widths
    assert model.get_weights().parameter_count() == model.parameter_count()


def test_layer_stack_order():
    model = build_model(10, 3, TrainConfig())
    kinds = [s.kind for s in model.specs]
    assert kinds == ["dense", "batch_norm", "dropout"] * 5 + ["dense"]
    assert [s.output_dim for s in model.specs if s.kind == "dense"] == [512, 256, 128, 64, 32, 3]
    assert all(s.l1_coeff == 1e-5 for s in model.specs[:-1] if s.kind == "dense")
    assert model.specs[-1].l1_coeff == 0.0


def test_initialization_contract():
    model = build_model(7, 3, TrainConfig(seed=5), hidden_widths=(6,))
    k = model.params[(0, "kernel")]
    assert np.all(np.abs(k) <= math.sqrt(6 / 13))
    assert np.all(model.params[(0, "bias")] == 0)
    assert np.all(model.params[(1, "bn_gamma")] == 1) and np.all(model.params[(1, "bn_running_var")] == 1)
    assert np.all(model.params[(1, "bn_beta")] == 0) and np.all(model.params[(1, "bn_running_mean")] == 0)


@pytest.mark.parametrize("kwargs", [
    dict(epochs=-1), dict(batch_size=0), dict(dropout_rate=1.0), dict(l1_coeff=-1.0), dict(adam_beta1=1.0),
])
def test_train_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_invalid_dims():
    with pytest.raises(ConfigError):
        build_model(0, 3, TrainConfig())
    with pytest.raises(ConfigError):
        build_model(4, 1, TrainConfig())


# --- forward ------------------------------------------------------------------

def test_softmax_large_logits():
    p = softmax(np.array([[1000.0, 0.0], [1000.0, 1000.0]]))
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [[1.0, 0.0], [0.5, 0.5]], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 4), elements=st.floats(-50, 50)))
def test_probabilities_are_distributions(x):
    model = build_model(4, 3, TrainConfig(seed=1), hidden_widths=(6, 5))
    p = predict_proba(model, x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_inference_deterministic():
    model = build_model(4, 3, TrainConfig(seed=1), hidden_widths=(6,))
    x = np.random.default_rng(0).normal(size=(9, 4))
    assert np.array_equal(predict_proba(model, x), predict_proba(model, x))


def test_wrong_input_width():
    model = build_model(4, 3, TrainConfig(), hidden_widths=(6,))
    with pytest.raises(ShapeError):
        predict_proba(model, np.zeros((2, 5)))


def test_dropout_needs_rng():
    model = build_model(4, 3, TrainConfig(dropout_rate=0.5), hidden_widths=(6,))
    with pytest.raises(UsageError):
        forward(model, np.zeros((3, 4)), "train")


def test_batch_norm_at_init_is_identity_up_to_eps():
    model = Model([LayerSpec("dense", 3, 3), LayerSpec("batch_norm", 3, 3), LayerSpec("dense", 3, 2)])
    model.params[(0, "kernel")] = np.eye(3)
    x = np.random.default_rng(2).normal(size=(4, 3))
    _, cache = forward(model, x, "infer")
    np.testing.assert_allclose(cache.inputs[2], x / math.sqrt(1 + BN_EPSILON), rtol=1e-15)


def test_running_stats_update_in_train_mode():
    model = build_model(3, 2, TrainConfig(dropout_rate=0.0), hidden_widths=(4,))
    x = np.random.default_rng(0).normal(size=(10, 3)) + 5
    h = x @ model.params[(0, "kernel")] + model.params[(0, "bias")]
    forward(model, x, "train")
    np.testing.assert_allclose(model.params[(1, "bn_running_mean")], 0.01 * h.mean(axis=0))
    np.testing.assert_allclose(model.params[(1, "bn_running_var")], 0.99 + 0.01 * h.var(axis=0))


# --- loss -------------------------------------------------------------------

def test_loss_uniform_two_class():
    assert loss(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]])) == pytest.approx(math.log(2), abs=1e-15)


def test_loss_perfect_prediction_is_zero():
    assert loss(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]])) == 0.0


def test_loss_clips_zero_probability():
    assert loss(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]])) == pytest.approx(-math.log(1e-12))


def test_loss_includes_l1_hand_oracle():
    model = Model([LayerSpec("dense", 2, 2, l1_coeff=0.01), LayerSpec("dense", 2, 2)])
    model.params[(0, "kernel")] = np.array([[1.0, -2.0], [0.5, 0.0]])
    model.params[(1, "kernel")] = np.array([[10.0, 10.0], [10.0, 10.0]])  # output layer carries no L1
    probs = np.array([[0.25, 0.75], [0.5, 0.5]])
    y = np.array([[0.0, 1.0], [1.0, 0.0]])
    expected = -(math.log(0.75) + math.log(0.5)) / 2 + 0.01 * 3.5
    assert loss(probs, y, model) == pytest.approx(expected, abs=1e-15)


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        loss(np.ones((2, 3)) / 3, np.ones((2, 2)))


# --- backward -----------------------------------------------------------------

def _assert_grads_close(analytic, numeric):
    for e in analytic.entries:
        num = numeric[(e.layer_index, e.role)]
        tol = np.maximum(1e-4, 1e-3 * np.abs(num))
        assert np.all(np.abs(e.values - num) <= tol), (e.layer_index, e.role)


def test_gradients_match_finite_differences(tiny_model, tiny_batch):
    x, y = tiny_batch
    _, cache = forward(tiny_model, x, "train")
    analytic = backward(tiny_model, cache, y)
    numeric = finite_difference_grads(tiny_model, x, y)
    assert {(e.layer_index, e.role) for e in analytic.entries} == set(numeric)
    kinds = {tiny_model.specs[e.layer_index].kind for e in analytic.entries}
    assert kinds == {"dense", "batch_norm"}
    _assert_grads_close(analytic, numeric)


def test_gradients_with_fixed_dropout_mask(tiny_batch):
    model = build_model(4, 3, TrainConfig(dropout_rate=0.3, seed=9), hidden_widths=(6, 5))
    x, y = tiny_batch
    _, cache = forward(model, x, "train", np.random.default_rng(4))
    analytic = backward(model, cache, y)
    _assert_grads_close(analytic, finite_difference_grads(model, x, y, rng_seed=4))


def test_output_bias_gradient_is_mean_residual(tiny_model, tiny_batch):
    x, y = tiny_batch
    probs, cache = forward(tiny_model, x, "train")
    g = backward(tiny_model, cache, y)
    last = len(tiny_model.specs) - 1
    np.testing.assert_allclose(g[(last, "bias")], (probs - y).mean(axis=0), atol=1e-15)


def test_backward_rejects_inference_cache(tiny_model, tiny_batch):
    x, y = tiny_batch
    _, cache = forward(tiny_model, x, "infer")
    with pytest.raises(UsageError):
        backward(tiny_model, cache, y)


def test_backward_rejects_stale_cache(tiny_model, tiny_batch):
    x, y = tiny_batch
    _, cache = forward(tiny_model, x, "train")
    tiny_model.set_weights(tiny_model.get_weights())
    with pytest.raises(UsageError):
        backward(tiny_model, cache, y)


# --- Adam ---------------------------------------------------------------------

def _scalar_model():
    model = Model([LayerSpec("dense", 1, 2)])
    model.params[(0, "kernel")] = np.ones((1, 2))
    return model


def _grads(model, value):
    return ModelWeights([WeightEntry(i, r, np.full_like(v, value)) for (i, r), v in model.params.items()])


def test_adam_first_step_moves_by_lr():
    model = _scalar_model()
    adam_step(model, _grads(model, 1.0), AdamState(model, learning_rate=0.1), 1)
    np.testing.assert_allclose(model.params[(0, "kernel")], 0.9, atol=1e-8)


@pytest.mark.parametrize("lr,g", [(0.1, 0.0), (0.0, 1.0)])
def test_adam_no_movement(lr, g):
    model = _scalar_model()
    before = model.get_weights()
    adam_step(model, _grads(model, g), AdamState(model, learning_rate=lr), 1)
    assert model.get_weights().checksum() == before.checksum()


def test_adam_identical_sequences_stay_identical():
    a, b = _scalar_model(), _scalar_model()
    sa, sb = AdamState(a), AdamState(b)
    rng = np.random.default_rng(0)
    for t in range(1, 6):
        g = rng.normal()
        adam_step(a, _grads(a, g), sa, t)
        adam_step(b, _grads(b, g), sb, t)
    assert a.get_weights().checksum() == b.get_weights().checksum()


def test_adam_step_counter_starts_at_one():
    model = _scalar_model()
    with pytest.raises(UsageError):
        adam_step(model, _grads(model, 1.0), AdamState(model), 0)


def test_adam_rejects_foreign_gradients():
    model = _scalar_model()
    bad = ModelWeights([WeightEntry(0, "kernel", np.ones((3, 3)))])
    with pytest.raises(ShapeError):
        adam_step(model, bad, AdamState(model), 1)


# --- training -----------------------------------------------------------------

@pytest.mark.parametrize("n,frac,expected", [(100, 0.1, 10), (30, 0.7, 21), (9, 0.1, 0), (10, 0.0, 0)])
def test_held_out_count(n, frac, expected):
    assert held_out_count(n, frac) == expected


def _separable(n=200, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    x = rng.normal(scale=0.3, size=(n, 6))
    x[:, 0] += np.where(labels == 1, 2.0, -2.0)
    return x, onehot(labels, 2)


def test_train_learns_separable_data():
    x, y = _separable()
    model = build_model(6, 2, TrainConfig(seed=0), hidden_widths=(16, 8))
    out = train(model, x, y, TrainConfig(epochs=15, seed=0), val_split=0.2)
    assert out.n_val == 40 and out.n_train == 160
    assert out.val_accuracy >= 0.95
    assert len(out.history) == 15


@pytest.mark.parametrize("seed", range(5))
def test_shuffled_labels_near_chance(seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.normal(size=(400, 8))
    y = onehot(rng.integers(0, 4, 400), 4)
    model = build_model(8, 4, TrainConfig(seed=seed), hidden_widths=(16, 8))
    out = train(model, x, y, TrainConfig(epochs=5, seed=seed), val_split=0.25)
    assert 0.10 <= out.val_accuracy <= 0.45


def test_train_is_deterministic():
    x, y = _separable(60)
    cfg = TrainConfig(epochs=3, seed=7)
    checks = []
    for _ in range(2):
        model = build_model(6, 2, cfg, hidden_widths=(8,))
        train(model, x, y, cfg)
        checks.append(model.get_weights().checksum())
    assert checks[0] == checks[1]


def test_train_without_validation_is_degenerate():
    x, y = _separable(20)
    model = build_model(6, 2, TrainConfig(seed=0), hidden_widths=(4,))
    out = train(model, x, y, TrainConfig(epochs=1), val_split=0.0)
    assert out.degenerate and out.n_val == 0


def test_train_diverges_loudly():
    x, y = _separable(40)
    model = build_model(6, 2, TrainConfig(seed=0), hidden_widths=(4,))
    model.params[(0, "kernel")][:] = np.nan
    with pytest.raises(DivergenceError):
        train(model, x, y, TrainConfig(epochs=1))
