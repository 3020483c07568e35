"""Gradient correctness of every op against central finite differences."""

import numpy as np
import pytest

from spherecorr import autodiff as ad
from spherecorr.autodiff import Tensor, finite_diff_grad, grad


def rel_error(a, b):
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(np.ravel(a)), np.linalg.norm(np.ravel(b)), 1e-12)
    return num / den


def check_op(build, shapes, rng, tol=1e-5, h=1e-6):
    """Compare analytic and finite-difference gradients of a scalarized op."""
    values = [rng.normal(size=s) for s in shapes]
    leaves = [ad.parameter(v) for v in values]
    out = build(*leaves)
    w = rng.normal(size=out.value.shape)
    loss = ad.tsum(ad.mul(out, w))
    analytic = grad(loss, leaves)

    def f(params):
        inner = build(*[Tensor(p) for p in params])
        return float((inner.value * w).sum())

    numeric = finite_diff_grad(f, values, h=h)
    for g_a, g_n in zip(analytic, numeric):
        assert rel_error(g_a, g_n) < tol


OPS = {
    "add": (lambda a, b: ad.add(a, b), [(3, 4), (3, 4)]),
    "add_broadcast": (lambda a, b: ad.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)]),
    "mul_colvec": (lambda a, b: ad.mul(a, b), [(3, 1), (3, 4)]),
    "scale": (lambda a: ad.scale(a, -2.5), [(3, 4)]),
    "relu": (lambda a: ad.relu(a), [(5, 5)]),
    "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
    "matmul_rows": (lambda a, b: ad.matmul_rows(a, b), [(3, 4), (4, 2)]),
    "transpose": (lambda a: ad.transpose(a), [(3, 4)]),
    "concat0": (lambda a, b: ad.concat([a, b], axis=0), [(2, 3), (4, 3)]),
    "concat1": (lambda a, b: ad.concat([a, b], axis=1), [(3, 2), (3, 4)]),
    "slice": (lambda a: ad.slice_axis(a, 1, 1, 3), [(4, 5)]),
    "gather": (lambda a: ad.gather_rows(a, np.array([0, 2, 2, 1])), [(4, 3)]),
    "reshape": (lambda a: ad.reshape(a, (6, 2)), [(3, 4)]),
    "broadcast_rows": (lambda a: ad.broadcast_rows(a, 5), [(1, 4)]),
    "sum_all": (lambda a: ad.tsum(a), [(3, 4)]),
    "sum_axis0": (lambda a: ad.tsum(a, axis=0), [(3, 4)]),
    "sum_axis1": (lambda a: ad.tsum(a, axis=1), [(3, 4)]),
    "mean_all": (lambda a: ad.tmean(a), [(3, 4)]),
    "mean_axis0": (lambda a: ad.tmean(a, axis=0), [(6, 3)]),
    "dot": (lambda a, b: ad.dot(a, b), [(5,), (5,)]),
    "row_dot": (lambda a, b: ad.row_dot(a, b), [(4, 3), (4, 3)]),
    "softmax": (lambda a: ad.softmax_rows(a), [(4, 6)]),
    "layer_norm": (lambda a: ad.layer_norm_rows(a), [(4, 6)]),
    "l2_normalize": (lambda a: ad.l2_normalize_rows(a), [(4, 3)]),
    "cross": (lambda a, b: ad.cross_rows(a, b), [(4, 3), (4, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    build, shapes = OPS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(100):
        check_op(build, shapes, rng)


def test_grad_of_quadratic():
    w = ad.parameter([1.0, 2.0])
    (g,) = grad(ad.dot(w, w), [w])
    assert np.allclose(g, [2.0, 4.0])


def test_constant_loss_gives_zero_grads():
    w = ad.parameter([1.0, 2.0])
    c = Tensor(5.0)
    (g,) = grad(ad.mul(c, c), [w])
    assert np.array_equal(g, np.zeros(2))


def test_param_absent_from_graph_gets_zeros():
    w = ad.parameter([1.0, 2.0])
    unused = ad.parameter(np.ones((2, 2)))
    g = grad(ad.dot(w, w), [w, unused])
    assert np.array_equal(g[1], np.zeros((2, 2)))


def test_grad_rejects_non_scalar_loss():
    w = ad.parameter([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        grad(ad.mul(w, w), [w])


def test_shared_subexpression_accumulates():
    w = ad.parameter([3.0])
    y = ad.mul(w, w)
    loss = ad.tsum(ad.add(y, y))  # 2 w^2 -> d/dw = 4w
    (g,) = grad(loss, [w])
    assert np.allclose(g, [12.0])


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 6))
    a = ad.softmax_rows(Tensor(x)).value
    b = ad.softmax_rows(Tensor(x)).value
    assert np.array_equal(a, b)


def test_l2_normalize_unit_norm_and_orthogonal_gradient():
    rng = np.random.default_rng(7)
    for _ in range(200):
        x = rng.normal(size=(3, 4)) * 10 ** rng.uniform(-3, 3)
        leaf = ad.parameter(x)
        y = ad.l2_normalize_rows(leaf)
        assert np.abs(np.linalg.norm(y.value, axis=1) - 1.0).max() < 1e-12
        w = rng.normal(size=(3, 4))
        (g,) = grad(ad.tsum(ad.mul(y, w)), [leaf])
        # the pulled-back gradient has no radial component
        radial = (g * x).sum(axis=1) / np.linalg.norm(x, axis=1)
        assert np.abs(radial).max() < 1e-9


def test_l2_normalize_rejects_zero_rows():
    with pytest.raises(ValueError, match="zero-norm"):
        ad.l2_normalize_rows(Tensor(np.zeros((2, 3))))


def test_finite_diff_quadratic_and_sine():
    (g,) = finite_diff_grad(lambda p: float(p[0] ** 2), [np.array(1.0)], h=1e-5)
    assert abs(g - 2.0) < 1e-9
    (g,) = finite_diff_grad(lambda p: float(np.sin(p[0])), [np.array(0.0)], h=1e-5)
    assert abs(g - 1.0) < 1e-9


def test_finite_diff_rejects_bad_step_and_nan():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda p: 0.0, [np.zeros(2)], h=0.0)
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda p: float("nan"), [np.zeros(2)], h=1e-5)


def test_finite_diff_coordinate_subset():
    x = np.arange(1.0, 5.0)
    (g,) = finite_diff_grad(lambda p: float((p[0] ** 2).sum()), [x],
                            h=1e-5, coords=[np.array([1, 3])])
    assert abs(g[1] - 2 * x[1]) < 1e-8 and abs(g[3] - 2 * x[3]) < 1e-8
    assert g[0] == 0.0 and g[2] == 0.0
