import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import naive_matmul
from deco.numerics import (NonFiniteError, elementwise, finite_diff_grad, init_normal, make_rng, matmul,
                           rms_norm, rms_norm_backward, rms_norm_forward, sigmoid, silu, softmax)


def test_matmul_identity_and_zero():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(a, np.eye(2)), a)
    assert np.array_equal(matmul(np.array([[1.0, 0], [0, 0]]), np.zeros((2, 2))), np.zeros((2, 2)))


def test_matmul_matches_triple_loop_exactly(gen):
    a = gen.standard_normal((5, 7))
    b = gen.standard_normal((7, 3))
    assert np.array_equal(matmul(a, b), naive_matmul(a, b))


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(np.zeros((2, 3)), np.zeros((4, 5)))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_matmul_integer_identity_and_distributivity(m, k, n, seed):
    g = np.random.default_rng(seed)
    a = g.integers(-5, 6, (m, k)).astype(np.float64)
    b = g.integers(-5, 6, (k, n)).astype(np.float64)
    c = g.integers(-5, 6, (k, n)).astype(np.float64)
    assert np.array_equal(matmul(a, np.eye(k)), a)
    assert np.array_equal(matmul(a, b + c), matmul(a, b) + matmul(a, c))


def test_matmul_deterministic(gen):
    a = gen.standard_normal((9, 13)).astype(np.float32)
    b = gen.standard_normal((13, 4)).astype(np.float32)
    assert matmul(a, b).tobytes() == matmul(a, b).tobytes()


def test_elementwise_examples():
    assert np.array_equal(elementwise("relu", np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    assert elementwise("silu", np.array([0.0]))[0] == 0.0
    assert np.allclose(elementwise("softmax_lastdim", np.zeros(3)), [1 / 3] * 3)


@pytest.mark.parametrize("op", ["relu", "silu", "sigmoid", "softmax_lastdim", "abs"])
def test_elementwise_shape_preserved(op, gen):
    x = gen.standard_normal((3, 4, 5))
    assert elementwise(op, x).shape == x.shape


def test_elementwise_unknown_and_nonfinite():
    with pytest.raises(ValueError):
        elementwise("tanh", np.zeros(2))
    with pytest.raises(NonFiniteError):
        elementwise("relu", np.array([1.0, np.inf]))
    with pytest.raises(NonFiniteError):
        elementwise("silu", np.array([np.nan]))


def test_sigmoid_extremes_stay_finite():
    s = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 0.5 and s[2] == 1.0
    assert np.allclose(silu(np.array([3.0])), 3.0 / (1 + np.exp(-3.0)))
    assert np.allclose(softmax(np.array([[1000.0, 1000.0]])), 0.5)


def test_rms_norm_examples(gen):
    assert np.array_equal(rms_norm(np.zeros(4), np.full(4, 3.0)), np.zeros(4))
    assert np.allclose(rms_norm(np.ones(4), np.ones(4), eps=0.0), np.ones(4))
    x = gen.standard_normal((6, 8))
    w = gen.standard_normal(8)
    direct = x / np.sqrt((x ** 2).mean(-1, keepdims=True) + 1e-6) * w
    assert np.allclose(rms_norm(x, w), direct, rtol=1e-14, atol=0)


@pytest.mark.parametrize("rms,tol", [(1.0, 1e-5), (10.0, 1e-7)])
def test_rms_norm_scale_invariance_tightens_with_rms(rms, tol, gen):
    x = gen.standard_normal(16)
    x *= rms / np.sqrt((x ** 2).mean())
    w = np.ones(16)
    for c in (1.0, 3.0, 100.0):
        assert np.abs(rms_norm(c * x, w) - rms_norm(x, w)).max() <= tol


def test_rms_norm_backward_matches_finite_differences(gen):
    x = gen.standard_normal((3, 5))
    w = gen.standard_normal(5)
    R = gen.standard_normal((3, 5))
    out, cache = rms_norm_forward(x, w)
    gx, gw = rms_norm_backward(R, w, cache)
    rep = finite_diff_grad(lambda: float((R * rms_norm(x, w)).sum()), {"x": x, "w": w}, {"x": gx, "w": gw})
    assert rep.passed, rep.lines()


def test_init_normal_determinism_and_std():
    a = init_normal((3, 2), 0.02, make_rng(7).child("w"))
    b = init_normal((3, 2), 0.02, make_rng(7).child("w"))
    assert a.size == 6 and a.tobytes() == b.tobytes()
    big = init_normal((100_000,), 0.02, make_rng(0).child("big"), dtype=np.float64)
    assert abs(big.std() - 0.02) < 0.05 * 0.02


def test_rng_children_are_independent_of_siblings():
    r = make_rng(3)
    a = r.child("x").generator().standard_normal(4)
    r.child("y").generator().standard_normal(100)
    assert np.array_equal(a, make_rng(3).child("x").generator().standard_normal(4))
    assert not np.array_equal(a, make_rng(3).child("y").generator().standard_normal(4))


def test_finite_diff_quadratic_and_constant():
    x = np.array([1.0, 2.0, 3.0])
    rep = finite_diff_grad(lambda: float((x ** 2).sum()), {"x": x}, {"x": 2 * x})
    assert rep.abs_err["x"] < 1e-7 and rep.passed
    rep = finite_diff_grad(lambda: 4.0, {"x": x}, {"x": np.zeros(3)})
    assert rep.abs_err["x"] < 1e-9


def test_finite_diff_flags_wrong_gradient_and_float32():
    x = np.array([1.0, 2.0])
    assert not finite_diff_grad(lambda: float((x ** 2).sum()), {"x": x}, {"x": 3 * x}).passed
    with pytest.raises(TypeError):
        finite_diff_grad(lambda: 0.0, {"x": x.astype(np.float32)}, {"x": x})


def test_finite_diff_reports_nonfinite_loss():
    x = np.array([0.0])
    with pytest.raises(NonFiniteError, match=r"x\[0\]"):
        finite_diff_grad(lambda: float(np.log(x[0] + 1e-5)) if x[0] > -1e-6 else float("nan"),
                         {"x": x}, {"x": np.zeros(1)})
