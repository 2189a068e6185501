import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtta import tensor as T
from rtta.verify import autodiff_vs_fd


def test_affine_identity():
    out = T.affine(np.array([1.0, 2.0]), np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(out.values, [1.0, 2.0])


def test_relu_definition():
    np.testing.assert_array_equal(T.relu(np.array([-1.0, 0.0, 3.0])).values, [0.0, 0.0, 3.0])


def test_log_softmax_equal_logits():
    np.testing.assert_allclose(T.log_softmax(np.zeros(2)).values, [-math.log(2)] * 2, rtol=0, atol=1e-15)


def test_backprop_sum_and_square():
    with T.Tape() as tape:
        x = tape.watch(T.Tensor([1.0, 2.0, 3.0]))
        loss = T.sum(x)
    np.testing.assert_array_equal(tape.backprop(loss, [x])[0], [1, 1, 1])

    with T.Tape() as tape:
        x = tape.watch(T.Tensor([1.0, 2.0]))
        loss = T.sum(T.mul(x, x))
    np.testing.assert_array_equal(tape.backprop(loss, [x])[0], [2.0, 4.0])


def test_backprop_rejects_non_scalar():
    with T.Tape() as tape:
        x = tape.watch(T.Tensor([1.0, 2.0]))
        y = T.mul(x, 2.0)
    with pytest.raises(T.ShapeError):
        tape.backprop(y, [x])


def test_unreachable_parameter_gets_zero():
    with T.Tape() as tape:
        x = tape.watch(T.Tensor([1.0, 2.0]))
        unused = tape.watch(T.Tensor(np.ones((2, 2))))
        loss = T.sum(x)
    gx, gu = tape.backprop(loss, [x, unused])
    np.testing.assert_array_equal(gu, np.zeros((2, 2)))


def test_backprop_gradients_also_land_in_grad_slot():
    with T.Tape() as tape:
        x = tape.watch(T.Tensor([3.0]))
        loss = T.sum(T.mul(x, x))
    tape.backprop(loss, {"x": x})
    np.testing.assert_array_equal(x.grad, [6.0])


def test_detach_preserves_values_and_blocks_gradient():
    x0 = np.array([0.5, -1.5])
    with T.Tape() as tape:
        x = tape.watch(T.Tensor(x0))
        y = tape.watch(T.Tensor([2.0, 3.0]))
        d = T.detach(x)
        loss = T.sum(T.mul(d, y))
    np.testing.assert_array_equal(d.values, x0)
    gx, gy = tape.backprop(loss, [x, y])
    np.testing.assert_array_equal(gx, 0.0)
    np.testing.assert_array_equal(gy, x0)


def test_shape_mismatch_names_primitive():
    with pytest.raises(T.ShapeError, match="affine"):
        T.affine(np.ones((2, 3)), np.ones((4, 2)), np.zeros(2))
    with pytest.raises(T.ShapeError, match="conv2d"):
        T.conv2d(np.ones((1, 2, 4, 4)), np.ones((3, 1, 3, 3)), np.zeros(3))


def test_nan_in_forward_is_a_hard_error():
    with pytest.raises(T.NonFiniteError):
        T.mul(np.array([np.inf]), 0.0)
    with pytest.raises(T.NonFiniteError):
        T.exp(np.array([1000.0]))


def test_finite_difference_examples():
    g = T.finite_difference_grad(lambda p: p["t"][0] ** 2, {"t": np.array([3.0])})
    assert abs(g["t"][0] - 6.0) < 1e-6
    g = T.finite_difference_grad(lambda p: math.sin(p["t"][0]), {"t": np.array([0.0])})
    assert abs(g["t"][0] - 1.0) < 1e-9
    g = T.finite_difference_grad(lambda p: 4.2, {"a": np.ones(3), "b": np.ones((2, 2))})
    assert all(np.all(v == 0) for v in g.values())


def test_finite_difference_leaves_input_untouched():
    arr = np.array([1.0, 2.0])
    T.finite_difference_grad(lambda p: float(np.sum(p["a"] ** 3)), {"a": arr})
    np.testing.assert_array_equal(arr, [1.0, 2.0])


def test_mlp_cross_entropy_matches_finite_differences():
    rng = np.random.default_rng(11)
    arrays = {
        "x": rng.normal(size=(3, 4)),
        "w1": rng.normal(size=(4, 5)), "b1": rng.normal(size=5),
        "w2": rng.normal(size=(5, 3)), "b2": rng.normal(size=3),
    }
    y = np.array([0, 2, 1])

    def build(t):
        h = T.relu(T.affine(t["x"], t["w1"], t["b1"]))
        z = T.affine(h, t["w2"], t["b2"])
        return T.neg(T.mean(T.pick(T.log_softmax(z), y)))

    assert autodiff_vs_fd(build, arrays) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_backprop_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    w0 = rng.normal(size=(3, 2))
    x = rng.normal(size=(4, 3))

    def grads(ca, cb):
        with T.Tape() as tape:
            w = tape.watch(T.Tensor(w0))
            z = T.matmul(x, w)
            l1 = T.sum(T.mul(z, z))
            l2 = T.sum(T.exp(T.mul(z, 0.1)))
            loss = T.add(T.mul(l1, ca), T.mul(l2, cb))
        return tape.backprop(loss, [w])[0]

    np.testing.assert_allclose(grads(a, b), a * grads(1.0, 0.0) + b * grads(0.0, 1.0), rtol=0, atol=1e-10)


def test_tapes_are_isolated_across_threads():
    import threading

    results = {}

    def work(tag, scale):
        with T.Tape() as tape:
            x = tape.watch(T.Tensor([1.0, 2.0]))
            loss = T.sum(T.mul(x, scale))
        results[tag] = tape.backprop(loss, [x])[0]

    threads = [threading.Thread(target=work, args=(i, float(i))) for i in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(1, 5):
        np.testing.assert_array_equal(results[i], [i, i])
