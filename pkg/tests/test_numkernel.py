import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from citune import numkernel as nk


def t(values, grad=False):
    return nk.Tensor(np.asarray(values, dtype=np.float64), grad)


def test_matmul_shape():
    out = nk.matmul(t(np.ones((2, 3))), t(np.ones((3, 1))))
    assert out.shape == (2, 1)


def test_matmul_mismatch_names_shapes():
    with pytest.raises(nk.ShapeError, match=r"\(2, 3\).*\(2, 1\)"):
        nk.matmul(t(np.ones((2, 3))), t(np.ones((2, 1))))


def test_elementwise_mismatch_rejected():
    with pytest.raises(nk.ShapeError):
        nk.mul(t([1.0, 2.0]), t([1.0, 2.0, 3.0]))


def test_relu_values():
    assert nk.relu(t([-1.0, 0.0, 2.0])).values.tolist() == [0.0, 0.0, 2.0]


def test_uniform_cross_entropy_is_log4():
    loss = nk.softmax_cross_entropy(t(np.zeros((1, 4))), [2])
    assert loss.item() == pytest.approx(math.log(4.0), abs=1e-12)
    assert loss.item() == pytest.approx(1.3863, abs=1e-4)


def test_backward_square():
    theta = t([3.0], grad=True)
    nk.backward(nk.total(nk.mul(theta, theta)))
    assert theta.grad.tolist() == [6.0]


def test_backward_constant_gives_zero_grad():
    theta = t([3.0], grad=True)
    c = t([5.0])
    loss = nk.add(nk.total(nk.scale(theta, 0.0)), nk.total(c))
    nk.backward(loss)
    assert theta.grad.tolist() == [0.0]


def test_backward_rejects_non_scalar():
    theta = t([1.0, 2.0], grad=True)
    with pytest.raises(ValueError, match="scalar"):
        nk.backward(nk.mul(theta, theta))


def test_backward_accumulates_until_zeroed():
    theta = t([2.0], grad=True)
    nk.backward(nk.total(nk.mul(theta, theta)))
    nk.backward(nk.total(nk.mul(theta, theta)))
    assert theta.grad.tolist() == [8.0]


def test_tape_cleared_after_backward():
    theta = t([2.0], grad=True)
    nk.backward(nk.total(nk.mul(theta, theta)))
    assert len(nk.get_tape().records) == 0


def test_no_grad_records_nothing():
    theta = t([2.0], grad=True)
    with nk.no_grad():
        nk.mul(theta, theta)
    assert len(nk.get_tape().records) == 0


def test_non_finite_rejected():
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        nk.mul(t([1e200], grad=True), t([1e200]))


def test_two_layer_network_matches_finite_difference():
    rng = np.random.default_rng(7)
    w1, w2 = t(rng.uniform(-1, 1, (3, 4)), True), t(rng.uniform(-1, 1, (4, 2)), True)
    x = t(rng.uniform(-1, 1, (5, 3)))
    y = [0, 1, 1, 0, 1]

    def loss(_):
        return nk.softmax_cross_entropy(nk.matmul(nk.tanh(nk.matmul(x, w1)), w2), y)

    assert nk.check_gradients(loss, [w1, w2]) < 1e-4


def test_finite_diff_quadratic_exact():
    theta = t([3.0])
    (g,) = nk.finite_diff_grad(lambda p: nk.total(nk.mul(p[0], p[0])), [theta], eps=1e-4)
    assert g[0] == pytest.approx(6.0, abs=1e-6)


def test_finite_diff_sin():
    theta = t([0.0])
    (g,) = nk.finite_diff_grad(lambda p: math.sin(p[0].values[0]), [theta])
    assert g[0] == pytest.approx(1.0, abs=1e-9)


def test_finite_diff_constant():
    theta = t([0.3, -0.2])
    (g,) = nk.finite_diff_grad(lambda p: 4.0, [theta])
    assert np.all(g == 0.0)


def test_finite_diff_rejects_bad_eps():
    with pytest.raises(ValueError):
        nk.finite_diff_grad(lambda p: 0.0, [t([1.0])], eps=0.0)


def test_sgd_step_arithmetic():
    theta = t([1.0], grad=True)
    theta.grad = np.array([2.0])
    nk.sgd_step([theta], 0.1)
    assert theta.values[0] == pytest.approx(0.8)
    assert theta.grad is None


def test_sgd_zero_lr_is_identity():
    theta = t([1.5], grad=True)
    theta.grad = np.array([2.0])
    nk.sgd_step([theta], 0.0)
    assert theta.values[0] == 1.5


def test_sgd_missing_grad_names_parameter():
    theta = nk.Tensor(np.ones(2), True, "w_special")
    with pytest.raises(ValueError, match="w_special"):
        nk.sgd_step([theta], 0.1)


def test_sgd_converges_on_square():
    theta = t([1.0], grad=True)
    for _ in range(100):
        nk.backward(nk.total(nk.mul(theta, theta)))
        nk.sgd_step([theta], 0.1)
    assert abs(theta.values[0]) < 1e-8
    assert theta.values[0] == pytest.approx(0.8**100, rel=1e-12)


def test_forward_eval_deterministic():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    out1 = nk.forward_eval(lambda: nk.tanh(nk.matmul(t(a), t(b))))
    out2 = nk.forward_eval(lambda: nk.tanh(nk.matmul(t(a), t(b))))
    assert out1.values.tobytes() == out2.values.tobytes()


@pytest.mark.parametrize("name", sorted(nk.PRIMITIVE_CASES))
def test_primitive_gradients_100_seeds(name):
    make = nk.PRIMITIVE_CASES[name]
    for seed in range(100):
        fn, params = make(np.random.default_rng(seed))
        assert nk.check_gradients(fn, params) < 1e-4, (name, seed)


@given(
    st.lists(st.floats(0.5, 4.0), min_size=2, max_size=4),
    st.floats(0.05, 0.95),
    st.integers(0, 2**16),
)
def test_sgd_monotone_on_positive_definite_quadratic(eigs, frac, seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(len(eigs), len(eigs))))
    a = q @ np.diag(eigs) @ q.T
    lr = frac * 2.0 / max(eigs)
    theta = t(rng.normal(size=len(eigs)), grad=True)
    amat = t(a)

    def loss():
        return nk.scale(nk.total(nk.mul(theta, nk.matmul(amat, theta))), 0.5)

    prev = nk.forward_eval(loss).item()
    nk.get_tape().clear()
    for _ in range(20):
        nk.backward(loss())
        nk.sgd_step([theta], lr)
        cur = nk.forward_eval(loss).item()
        nk.get_tape().clear()
        assert cur <= prev + 1e-15
        prev = cur
