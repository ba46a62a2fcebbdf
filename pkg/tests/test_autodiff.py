import math

import numpy as np
import pytest

from lagdecode import autodiff as ad


def grad_of(fn, *values):
    leaves = [ad.leaf(v) for v in values]
    return ad.backward(fn(*leaves), leaves)


def fd_check(fn, *values, h=1e-5):
    """Max relative error of backprop vs central differences over all inputs."""
    grads = grad_of(fn, *values)
    worst = 0.0
    for i, v in enumerate(values):
        def scalar(z, i=i):
            args = [ad.constant(u) for u in values]
            args[i] = ad.constant(z)
            return float(fn(*args).value)
        worst = max(worst, ad.relative_error(grads[i], ad.finite_diff_gradient(scalar, v, h)))
    return worst


# --- examples ---------------------------------------------------------------

def test_eval_scalar_sum():
    assert ad.eval_scalar(ad.sum(ad.leaf([1.0, 2.0, 3.0]))) == 6.0


def test_eval_log_uniform_softmax():
    root = ad.take_rows(ad.log(ad.softmax(ad.leaf([[0.0, 0.0]]))), 0, 1)
    val = ad.eval_scalar(ad.sum(ad.mul(root, ad.constant([[1.0, 0.0]]))))
    assert val == pytest.approx(-math.log(2), abs=1e-15)


def test_cosine_self_is_one(rng):
    v = rng.normal(size=5)
    # the 1e-12 norm guard costs about 1e-12 relative
    assert ad.eval_scalar(ad.cosine(ad.leaf(v), ad.leaf(v))) == pytest.approx(1.0, abs=1e-10)


def test_eval_scalar_rejects_vector():
    with pytest.raises(ad.GraphError):
        ad.eval_scalar(ad.leaf([1.0, 2.0]))


def test_backward_linear_and_product():
    x = ad.leaf(2.0)
    assert ad.backward(3.0 * x, [x])[0] == 3.0
    x, y = ad.leaf(2.0), ad.leaf(5.0)
    gx, gy = ad.backward(x * y, [x, y])
    assert (gx, gy) == (5.0, 2.0)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(0)
    for _ in range(5):
        z = rng.normal(size=(1, 6))
        k = int(rng.integers(6))
        target = np.eye(6)[[k]]
        (g,) = grad_of(lambda a: ad.cross_entropy(a, target), z)
        p = np.exp(z - z.max())
        p /= p.sum()
        np.testing.assert_allclose(g, p - target, atol=1e-12)
        fd = ad.finite_diff_gradient(lambda a: float(ad.cross_entropy(ad.constant(a), target).value), z)
        assert ad.relative_error(g, fd) < 1e-6


def test_backward_rejects_foreign_leaf():
    x, y = ad.leaf(1.0), ad.leaf(2.0)
    with pytest.raises(ad.GraphError):
        ad.backward(x * 2.0, [y])


def test_backward_is_repeatable():
    x = ad.leaf(np.arange(4.0))
    root = ad.sum(ad.tanh(x) * x)
    g1 = ad.backward(root, [x])[0]
    g2 = ad.backward(root, [x])[0]
    assert np.array_equal(g1, g2)


def test_finite_diff_examples():
    g = ad.finite_diff_gradient(lambda v: float(np.sum(v ** 2)), np.array([1.0, 2.0]), 1e-5)
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)
    assert np.all(ad.finite_diff_gradient(lambda v: 7.0, np.ones(3)) == 0.0)
    with pytest.raises(ValueError):
        ad.finite_diff_gradient(lambda v: 0.0, np.ones(2), h=0.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_names_primitive():
    with pytest.raises(ad.NonFiniteError) as info:
        ad.log(ad.leaf([0.0, 1.0]))
    assert info.value.primitive == "log"


def test_evaluate_recomputes_and_is_deterministic():
    x = ad.leaf([[0.3, -1.2], [2.0, 0.1]])
    root = ad.sum(ad.log_softmax(x @ x.T))
    first = float(root.value)
    assert ad.eval_scalar(root) == first
    x.value = x.value * 2
    assert ad.eval_scalar(root) != first


def test_stop_gradient_forward_identity_backward_zero(rng):
    v = rng.normal(size=(3, 4))
    x = ad.leaf(v)
    s = ad.stop_gradient(x)
    assert np.array_equal(s.value, v)
    (g,) = ad.backward(ad.sum(s * s) + ad.sum(x), [x])
    assert np.array_equal(g, np.ones_like(v))


# --- every primitive against finite differences -----------------------------

def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


PRIMITIVE_CASES = {
    "add": (lambda a, b: ad.sum(ad.add(a, b) * ad.add(a, b)), lambda r: (r.normal(size=(3, 4)), r.normal(size=(4,)))),
    "sub": (lambda a, b: ad.sum(ad.tanh(ad.sub(a, b))), lambda r: (r.normal(size=(3, 4)), r.normal(size=(3, 4)))),
    "mul": (lambda a, b: ad.sum(ad.mul(a, b) * a), lambda r: (r.normal(size=(2, 3)), r.normal(size=(2, 3)))),
    "neg": (lambda a: ad.sum(ad.neg(a) * a), lambda r: (r.normal(size=(4,)),)),
    "matmul": (lambda a, b: ad.sum(ad.tanh(a @ b)), lambda r: (r.normal(size=(3, 4)), r.normal(size=(4, 2)))),
    "matmul_vec": (lambda a, b: ad.sum(ad.tanh(a @ b)), lambda r: (r.normal(size=(4,)), r.normal(size=(4, 2)))),
    "matmul_matvec": (lambda a, b: ad.sum(ad.tanh(a @ b)), lambda r: (r.normal(size=(3, 4)), r.normal(size=(4,)))),
    "transpose": (lambda a: ad.sum(ad.tanh(ad.transpose(a) @ a)), lambda r: (r.normal(size=(3, 2)),)),
    "exp": (lambda a: ad.sum(ad.exp(a)), lambda r: (r.normal(size=(3,)),)),
    "log": (lambda a: ad.sum(ad.log(a)), lambda r: (_pos(r, (4,)),)),
    "tanh": (lambda a: ad.sum(ad.tanh(a) * a), lambda r: (r.normal(size=(3, 3)),)),
    "mean_rows": (lambda a: ad.sum(ad.tanh(ad.mean_rows(a))), lambda r: (r.normal(size=(4, 3)),)),
    "softmax": (lambda a: ad.sum(ad.softmax(a) * ad.constant(np.arange(12.0).reshape(3, 4))), lambda r: (r.normal(size=(3, 4)),)),
    "log_softmax": (lambda a: ad.sum(ad.log_softmax(a) * ad.constant(np.arange(12.0).reshape(3, 4))), lambda r: (r.normal(size=(3, 4)),)),
    "cosine": (lambda a, b: ad.cosine(a, b), lambda r: (r.normal(size=(5,)), r.normal(size=(5,)))),
    "cross_entropy": (lambda z, t: ad.cross_entropy(z, t), lambda r: (r.normal(size=(3, 4)), r.dirichlet(np.ones(4), size=3))),
    "normalize_rows": (lambda a: ad.sum(ad.normalize_rows(a) * ad.constant(np.arange(6.0).reshape(2, 3))), lambda r: (r.normal(size=(2, 3)),)),
    "take_rows": (lambda a: ad.sum(ad.tanh(ad.take_rows(a, 1, 3))), lambda r: (r.normal(size=(4, 2)),)),
    "concat_rows": (lambda a, b: ad.sum(ad.tanh(ad.concat_rows(a, b) @ ad.constant(np.ones((2, 1))))), lambda r: (r.normal(size=(2, 2)), r.normal(size=(3, 2)))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_matches_finite_differences(name):
    fn, make = PRIMITIVE_CASES[name]
    for seed in range(20):
        values = make(np.random.default_rng(seed))
        assert fd_check(fn, *values) <= 1e-4, f"{name} seed {seed}"


def test_unbroadcast_scalar_operand():
    x = ad.leaf(np.ones((2, 3)))
    s = ad.leaf(2.0)
    gx, gs = ad.backward(ad.sum(x * s), [x, s])
    assert gs == 6.0 and np.all(gx == 2.0)


def test_cosine_zero_vector_guarded():
    v = ad.cosine(ad.leaf(np.zeros(3)), ad.leaf(np.ones(3)))
    assert float(v.value) == 0.0
