import math

import numpy as np
import pytest

from diff_engine import (
    ShapeError,
    Tensor,
    add,
    backward,
    bce,
    collect_grads,
    concat_cols,
    cross_entropy,
    elu,
    grad_check,
    hadamard,
    layer_norm,
    matmul,
    mean_all,
    one_minus,
    parameter,
    scale,
    sigmoid,
    softmax_rowless,
    sub,
    sum_all,
    transpose,
)


def test_matmul_identity(rng):
    b = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(matmul(np.eye(3), b).numpy(), b)


def test_matmul_vector_and_shape_error(rng):
    a = rng.normal(size=(5, 3))
    w = rng.normal(size=3)
    np.testing.assert_allclose(matmul(a, w).numpy(), a @ w)
    with pytest.raises(ShapeError) as err:
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert "(2, 3)" in str(err.value)


def test_concat_cols_shape(rng):
    parts = [rng.normal(size=(6, 4)) for _ in range(4)]
    out = concat_cols(parts)
    assert out.shape == (6, 16)
    np.testing.assert_array_equal(out.numpy()[:, 4:8], parts[1])


def test_elementwise_shape_error():
    with pytest.raises(ShapeError):
        add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ShapeError):
        hadamard(np.ones(3), np.ones(4))


def test_trace_gradient_matches_c_bt(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    c = rng.normal(size=(3, 2))

    def f(p):
        return sum_all(hadamard(matmul(p["A"], b), c))

    leaf = parameter(a, name="A")
    backward(f({"A": leaf}))
    np.testing.assert_allclose(leaf.grad, c @ b.T, atol=1e-12)
    assert grad_check(f, {"A": a}) < 1e-8


def test_nonlinearity_values():
    assert sigmoid(np.array([0.0])).numpy()[0] == 0.5
    np.testing.assert_allclose(softmax_rowless(np.array([5.0, 5.0, 5.0])).numpy(), [1 / 3] * 3)
    assert elu(np.array([-1.0])).numpy()[0] == pytest.approx(math.exp(-1) - 1, abs=1e-15)
    assert elu(np.array([-1.0])).numpy()[0] == pytest.approx(-0.63212, abs=1e-5)
    assert elu(np.array([2.5])).numpy()[0] == 2.5


def test_softmax_sums_to_one_and_is_shift_invariant(rng):
    for _ in range(50):
        x = rng.normal(scale=5.0, size=rng.integers(1, 20))
        p = softmax_rowless(x).numpy()
        assert abs(p.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(softmax_rowless(x + rng.normal() * 10).numpy(), p, atol=1e-9)


def test_layer_norm_rows_are_standardized(rng):
    x = rng.normal(scale=10.0, size=(7, 16)) + 3.0
    out = layer_norm(x, np.ones(16), np.zeros(16)).numpy()
    assert np.all(np.abs(out.mean(axis=1)) < 1e-9)
    assert np.all(np.abs(out.var(axis=1) - 1.0) < 1e-6)


def test_bce_at_one_half_is_log_two():
    for t in (0.0, 0.3, 1.0):
        target = np.full((3, 3), t)
        assert bce(np.full((3, 3), 0.5), target).item() == pytest.approx(math.log(2), abs=1e-12)


def test_bce_clamps_saturated_predictions():
    value = bce(np.array([0.0, 1.0]), np.array([1.0, 0.0])).item()
    assert math.isfinite(value)
    assert value == pytest.approx(-math.log(1e-12), rel=1e-4)


def test_cross_entropy_of_a_distribution_with_itself_is_entropy():
    p = np.array([math.e / (1 + math.e), 1 / (1 + math.e)])
    assert cross_entropy(p, p).item() == pytest.approx(0.58220, abs=1e-5)
    assert cross_entropy(p, p).item() == pytest.approx(-(p * np.log(p)).sum(), abs=1e-12)


def test_grad_check_square():
    assert grad_check(lambda p: sum_all(hadamard(p["x"], p["x"])), {"x": np.array([3.0])}) < 1e-8


def test_grad_check_constant_function():
    assert grad_check(lambda p: Tensor(np.array(2.0)), {"x": np.array([1.0, 2.0])}) == 0.0


def test_grad_check_random_quadratic_forms(rng):
    for _ in range(100):
        n = int(rng.integers(1, 6))
        m = rng.normal(size=(n, n))
        a = m + m.T
        x = rng.normal(size=(n, 1))

        def f(p):
            return sum_all(hadamard(p["x"], matmul(a, p["x"])))

        assert grad_check(f, {"x": x}) < 1e-6


@pytest.mark.parametrize(
    "op",
    [
        lambda t: sum_all(sigmoid(t)),
        lambda t: sum_all(elu(t)),
        lambda t: sum_all(hadamard(softmax_rowless(matmul(t, np.arange(4.0))), np.arange(3.0))),
        lambda t: sum_all(layer_norm(t, np.linspace(0.5, 2.0, 4), np.ones(4))),
        lambda t: mean_all(one_minus(scale(t, 0.3))),
        lambda t: sum_all(sigmoid(matmul(sub(t, 0.5), transpose(t)))),
        lambda t: bce(sigmoid(t), np.eye(3, 4)),
        lambda t: cross_entropy(np.array([0.2, 0.3, 0.5]), softmax_rowless(matmul(t, np.ones(4)))),
    ],
)
def test_every_op_passes_grad_check(op, rng):
    x = rng.normal(size=(3, 4))
    assert grad_check(lambda p: op(p["x"]), {"x": x}) < 1e-4


def test_collect_grads_fills_untouched_leaves_with_zeros():
    used = parameter(np.array([1.0, 2.0]), name="used")
    unused = parameter(np.ones((2, 2)), name="unused")
    backward(sum_all(hadamard(used, used)))
    grads = collect_grads([("used", used), ("unused", unused)])
    np.testing.assert_array_equal(grads["used"], [2.0, 4.0])
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))
