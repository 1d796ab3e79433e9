import math

import numpy as np
import pytest

from superfed.errors import NonFiniteError, ShapeError
from superfed.nn import (
    NetworkSpec,
    OptimizerState,
    WeightVector,
    cross_entropy,
    forward,
    init_weights,
    loss_and_grad,
    lr_at_round,
    sgd_step,
)

from oracles import central_diff, hand_cross_entropy, hand_forward, random_weights, rel_err


def test_spec_requires_hidden_layer():
    with pytest.raises(ValueError):
        NetworkSpec((3, 2))
    with pytest.raises(ValueError):
        NetworkSpec((3, 0, 2))


def test_two_nn_layout():
    assert NetworkSpec.two_nn(784, 10).layer_dims == (784, 200, 200, 10)


def test_flat_order_is_weight_rowmajor_then_bias(small_spec):
    flat = np.arange(small_spec.size, dtype=float)
    w = WeightVector.from_flat(small_spec, flat)
    assert w.params[0].shape == (2, 4)
    assert w.params[0][0, 1] == 1.0 and w.params[0][1, 0] == 4.0
    assert np.array_equal(w.params[1], [8, 9, 10, 11])
    assert np.array_equal(w.flatten(), flat)


def test_zero_weights_give_zero_logits(rng):
    spec = NetworkSpec((5, 7, 3))
    logits, _ = forward(WeightVector.zeros(spec), rng.normal(size=(4, 5)))
    assert np.array_equal(logits, np.zeros((4, 3)))


def test_identity_network_passes_nonnegative_input(rng):
    spec = NetworkSpec((3, 3, 3))
    w = WeightVector(spec, [np.eye(3), np.zeros(3), np.eye(3), np.zeros(3)])
    x = rng.uniform(0, 5, size=(6, 3))
    logits, _ = forward(w, x)
    assert np.array_equal(logits, x)


def test_forward_matches_hand_evaluation(rng, small_spec):
    w = random_weights(small_spec, rng)
    x = rng.normal(size=(5, 2))
    logits, _ = forward(w, x)
    expected = hand_forward([p.tolist() for p in w.params], x.tolist())
    np.testing.assert_allclose(logits, expected, rtol=1e-13, atol=1e-14)


def test_forward_rejects_wrong_width(small_spec, rng):
    with pytest.raises(ShapeError):
        forward(WeightVector.zeros(small_spec), rng.normal(size=(2, 3)))


def test_forward_is_deterministic(rng):
    spec = NetworkSpec((6, 16, 16, 4))
    w = init_weights(spec, rng)
    x = rng.normal(size=(8, 6))
    a, _ = forward(w, x)
    b, _ = forward(w, x)
    assert a.tobytes() == b.tobytes()


def test_uniform_logits_loss_is_log_n():
    for n in (2, 3, 10):
        assert cross_entropy(np.zeros((4, n)), np.arange(4) % n) == pytest.approx(math.log(n), abs=1e-15)


def test_confident_logits_loss_vanishes():
    logits = np.array([[0.0, 800.0, 0.0]])
    assert cross_entropy(logits, np.array([1])) == pytest.approx(0.0, abs=1e-300)


def test_cross_entropy_matches_hand_loop(rng):
    logits = rng.normal(size=(7, 4)) * 3
    y = rng.integers(0, 4, size=7)
    assert cross_entropy(logits, y) == pytest.approx(hand_cross_entropy(logits.tolist(), y.tolist()), rel=1e-13)


def test_cross_entropy_shift_invariance(rng):
    logits = rng.normal(size=(10, 5))
    y = rng.integers(0, 5, size=10)
    for c in (-7.5, 3.0, 100.0):
        assert abs(cross_entropy(logits + c, y) - cross_entropy(logits, y)) <= 1e-12


def test_label_out_of_range_rejected(small_spec, rng):
    w = WeightVector.zeros(small_spec)
    _, trace = forward(w, rng.normal(size=(2, 2)))
    with pytest.raises(ValueError):
        loss_and_grad(w, trace, np.array([0, 3]))


def _fd_grad(w, x, y, h=1e-6):
    spec = w.spec

    def f(flat):
        logits, _ = forward(WeightVector.from_flat(spec, flat), x)
        return cross_entropy(logits, y)

    return central_diff(f, w.flatten(), h)


def test_gradient_matches_finite_differences_2_4_3(rng, small_spec):
    w = random_weights(small_spec, rng)
    x = rng.normal(size=(6, 2))
    y = rng.integers(0, 3, size=6)
    _, trace = forward(w, x)
    _, g = loss_and_grad(w, trace, y)
    assert rel_err(g.flatten(), _fd_grad(w, x, y)) <= 1e-6


@pytest.mark.parametrize("hidden", [(3,), (5, 4), (4, 3, 5)])
def test_gradient_property_100_draws(hidden):
    rng = np.random.default_rng(len(hidden))
    worst = 0.0
    for _ in range(100):
        n_in, n_out = rng.integers(1, 5), rng.integers(2, 5)
        spec = NetworkSpec((int(n_in), *hidden, int(n_out)))
        batch = int(rng.integers(1, 9))
        w = random_weights(spec, rng)
        x = rng.normal(size=(batch, spec.input_dim))
        y = rng.integers(0, spec.class_count, size=batch)
        _, trace = forward(w, x)
        _, g = loss_and_grad(w, trace, y)
        worst = max(worst, rel_err(g.flatten(), _fd_grad(w, x, y)))
    assert worst <= 1e-6


TINY = NetworkSpec((1, 1, 1))


def _const(value):
    return WeightVector.from_flat(TINY, np.full(TINY.size, float(value)))


def test_sgd_plain_step():
    state = OptimizerState.fresh(TINY, momentum=0.0, weight_decay=0.0)
    w, _ = sgd_step(_const(1.0), _const(2.0), state, 0.1)
    np.testing.assert_allclose(w.flatten(), 0.8, rtol=0, atol=1e-15)


def test_sgd_zero_gradient_is_fixed_point():
    state = OptimizerState.fresh(TINY, momentum=0.9, weight_decay=0.0)
    w0 = _const(1.7)
    w, _ = sgd_step(w0, _const(0.0), state, 0.1)
    assert w.array_equal(w0)


def test_sgd_momentum_second_step_moves_019():
    state = OptimizerState.fresh(TINY, momentum=0.9, weight_decay=0.0)
    w1, state = sgd_step(_const(0.0), _const(1.0), state, 0.1)
    w2, _ = sgd_step(w1, _const(1.0), state, 0.1)
    np.testing.assert_allclose((w1 - w2).flatten(), 0.19, rtol=1e-14)


def test_sgd_weight_decay_enters_velocity():
    state = OptimizerState.fresh(TINY, momentum=0.5, weight_decay=0.1)
    w, state = sgd_step(_const(2.0), _const(1.0), state, 0.1)
    # v = 1 + 0.1 * 2 = 1.2 ; w = 2 - 0.12
    np.testing.assert_allclose(state.velocity.flatten(), 1.2)
    np.testing.assert_allclose(w.flatten(), 1.88)


def test_sgd_without_momentum_or_decay_is_vanilla(rng, small_spec):
    w = random_weights(small_spec, rng)
    g = random_weights(small_spec, rng)
    state = OptimizerState.fresh(small_spec, momentum=0.0, weight_decay=0.0)
    new, _ = sgd_step(w, g, state, 0.05)
    expected = [p - 0.05 * q for p, q in zip(w.params, g.params)]
    assert all(np.array_equal(a, b) for a, b in zip(new.params, expected))


def test_sgd_rejects_nonfinite_gradient_with_context():
    g = _const(1.0)
    g.params[0][0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="round 3, client 7"):
        sgd_step(_const(1.0), g, OptimizerState.fresh(TINY), 0.1, where="round 3, client 7")


def test_sgd_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        sgd_step(_const(1.0), _const(1.0), OptimizerState.fresh(TINY), 0.0)


def test_lr_schedule():
    assert lr_at_round(0.01, 0) == 0.01
    assert lr_at_round(0.01, 1) == pytest.approx(0.0099, rel=1e-15)
    assert lr_at_round(0.37, 0) == 0.37
    assert lr_at_round(1.0, 100) == pytest.approx(0.99**100)
    with pytest.raises(ValueError):
        lr_at_round(0.01, -1)


def test_init_bounds_and_zero_bias(rng):
    spec = NetworkSpec((16, 9, 4))
    w = init_weights(spec, rng)
    for (weight, bias), fan_in in zip(w.layers(), (16, 9)):
        assert np.abs(weight).max() <= 1 / math.sqrt(fan_in)
        assert not bias.any()


def test_weight_vector_arithmetic(rng, small_spec):
    a, b = random_weights(small_spec, rng), random_weights(small_spec, rng)
    np.testing.assert_allclose((a + b).flatten(), a.flatten() + b.flatten())
    np.testing.assert_allclose((a - b).flatten(), a.flatten() - b.flatten())
    np.testing.assert_allclose((3.0 * a).flatten(), 3.0 * a.flatten())
    assert a.dot(b) == pytest.approx(float(a.flatten() @ b.flatten()), rel=1e-14)
    with pytest.raises(ShapeError):
        a + WeightVector.zeros(NetworkSpec((2, 5, 3)))
