from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sarouting import tape as tp


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def grads_and_fd(fn, xs):
    vs = [tp.Var(x) for x in xs]
    out = fn(*vs)
    analytic = tp.grad(out, vs)
    numeric = []
    for i, x in enumerate(xs):

        def f(xi, i=i):
            args = list(xs)
            args[i] = xi
            return float(fn(*args))

        numeric.append(numeric_grad(f, x))
    return analytic, numeric


CASES = {
    "add": (lambda x, y: tp.tsum(tp.mul(tp.add(x, y), tp.add(x, y))), [(3, 2), (2,)], False),
    "sub": (lambda x, y: tp.tsum(tp.square(tp.sub(x, y))), [(3, 2), (3, 1)], False),
    "mul": (lambda x, y: tp.tsum(tp.mul(x, y)), [(2, 3), (3,)], False),
    "div": (lambda x, y: tp.tsum(tp.div(x, y)), [(2, 3), (2, 3)], True),
    "exp_log": (lambda x: tp.tsum(tp.log(tp.add(tp.exp(x), 1.0))), [(4,)], False),
    "relu": (lambda x: tp.tsum(tp.mul(tp.relu(x), x)), [(5,)], False),
    "mean": (lambda x: tp.tsum(tp.square(tp.mean(x, axis=0))), [(3, 4)], False),
    "reshape": (lambda x: tp.tsum(tp.mul(tp.reshape(x, (2, 6)), np.arange(12.0).reshape(2, 6))), [(3, 4)], False),
    "expand": (lambda x: tp.tsum(tp.square(tp.expand_dims(x, 1))), [(3,)], False),
    "take": (lambda x: tp.tsum(tp.square(tp.take(x, 1))), [(3, 2)], False),
    "einsum": (lambda x, y: tp.tsum(tp.square(tp.einsum("ij,jk->ik", x, y))), [(2, 3), (3, 4)], False),
    "einsum3": (lambda x, y, z: tp.tsum(tp.einsum("bikf,fg,bjkg->bijk", x, y, z)), [(1, 2, 2, 3), (3, 3), (1, 2, 2, 3)], False),
    "softmax_idle": (lambda x: tp.tsum(tp.mul(tp.softmax_idle(x, axis=0), np.arange(1.0, 5.0)[:, None])), [(4, 2)], False),
    "minimum": (lambda x: tp.tsum(tp.square(tp.minimum(x, 0.3))), [(6,)], False),
}


@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(name, seed):
    fn, shapes, positive = CASES[name]
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    analytic, numeric = grads_and_fd(fn, xs)
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=1e-5, atol=1e-7)


def test_plain_inputs_return_arrays():
    out = tp.tsum(tp.square(np.array([1.0, 2.0])))
    assert not isinstance(out, tp.Var) and out == 5.0


def test_constant_output_has_zero_gradient():
    x = tp.Var(np.ones(3))
    assert np.array_equal(tp.grad(np.float64(2.0), [x])[0], np.zeros(3))


def test_non_scalar_output_rejected():
    x = tp.Var(np.ones(3))
    with pytest.raises(ValueError):
        tp.grad(tp.square(x), [x])


def test_reused_node_accumulates():
    x = tp.Var(np.array(3.0))
    y = x * x * x
    assert tp.grad(y, [x])[0] == pytest.approx(27.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=6))
def test_softmax_idle_shares_positive_and_below_one(logits):
    s = tp.softmax_idle(np.array(logits))
    assert np.all(s > 0) and s.sum() < 1.0
