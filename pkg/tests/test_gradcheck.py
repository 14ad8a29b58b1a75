"""Finite-difference gradient checks for every differentiable op.

Each op gets >= 20 random probes per dtype. Tolerances: 1e-3 for f32 probes
(h = 1e-4 sits near the f32 noise floor; numerical_grad divides by the
realized step to stay below it), 1e-6 for f64.
"""

import numpy as np
import pytest

import spsc.tensor as T
from spsc.gradcheck import gradcheck, numerical_grad, rel_error
from spsc.tensor import Tensor

N_PROBES = 20
TOLS = {np.float32: 1e-3, np.float64: 1e-6}


def _probes(seed, shapes, dtype, low=-2.0, high=2.0):
    rng = np.random.default_rng(seed)
    for _ in range(N_PROBES):
        yield [
            Tensor(rng.uniform(low, high, size=s).astype(dtype), requires_grad=True)
            for s in shapes
        ]


def _run(fn, shapes, seed, low=-2.0, high=2.0):
    for dtype, tol in TOLS.items():
        worst = 0.0
        for tensors in _probes(seed, shapes, dtype, low, high):
            worst = max(worst, gradcheck(fn, tensors, tol=tol))
        assert worst <= tol


def _wsum(out, seed=0):
    # Weighted sum in f64 keeps the reduction itself out of the f32 error.
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * Tensor(w)).sum()


# -- arithmetic -----------------------------------------------------------------


def test_grad_add():
    _run(lambda ts: _wsum(ts[0] + ts[1]), [(3, 4), (3, 4)], seed=1)


def test_grad_add_broadcast():
    _run(lambda ts: _wsum(ts[0] + ts[1]), [(3, 4), (1, 4)], seed=2)


def test_grad_sub():
    _run(lambda ts: _wsum(ts[0] - ts[1]), [(3, 4), (3, 4)], seed=3)


def test_grad_mul():
    _run(lambda ts: _wsum(ts[0] * ts[1]), [(3, 4), (3, 4)], seed=4)


def test_grad_mul_broadcast_scalar():
    _run(lambda ts: _wsum(ts[0] * ts[1]), [(3, 4), ()], seed=5)


def test_grad_div():
    _run(lambda ts: _wsum(ts[0] / ts[1]), [(3, 4), (3, 4)], seed=6, low=0.5, high=2.0)


def test_grad_neg():
    _run(lambda ts: _wsum(-ts[0]), [(3, 4)], seed=7)


# -- unary ----------------------------------------------------------------------


def test_grad_exp():
    _run(lambda ts: _wsum(T.texp(ts[0])), [(3, 4)], seed=8)


def test_grad_log():
    _run(lambda ts: _wsum(T.tlog(ts[0])), [(3, 4)], seed=9, low=0.3, high=3.0)


def test_grad_sigmoid():
    _run(lambda ts: _wsum(T.sigmoid(ts[0])), [(3, 4)], seed=10, low=-4.0, high=4.0)


def test_grad_softplus():
    _run(lambda ts: _wsum(T.softplus(ts[0])), [(3, 4)], seed=11, low=-4.0, high=4.0)


def test_grad_silu():
    _run(lambda ts: _wsum(T.silu(ts[0])), [(3, 4)], seed=12, low=-4.0, high=4.0)


# -- shape & selection ------------------------------------------------------------


def test_grad_reshape():
    _run(lambda ts: _wsum(ts[0].reshape(2, 6)), [(3, 4)], seed=13)


def test_grad_transpose():
    _run(lambda ts: _wsum(ts[0].transpose((1, 0, 2))), [(2, 3, 4)], seed=14)


def test_grad_flip():
    _run(lambda ts: _wsum(ts[0].flip(1)), [(2, 5)], seed=15)


def test_grad_broadcast_to():
    _run(lambda ts: _wsum(T.broadcast_to(ts[0], (4, 3, 2))), [(1, 3, 2)], seed=16)


def test_grad_index():
    _run(lambda ts: _wsum(ts[0][:, 1:4]), [(3, 6)], seed=17)


def test_grad_concat():
    _run(lambda ts: _wsum(T.concat([ts[0], ts[1]], axis=1)), [(2, 3), (2, 2)], seed=18)


def test_grad_where():
    cond = np.random.default_rng(19).standard_normal((3, 4)) > 0
    _run(lambda ts: _wsum(T.where(cond, ts[0], ts[1])), [(3, 4), (3, 4)], seed=19)


# -- reductions & contractions ------------------------------------------------------


def test_grad_sum_axes():
    _run(lambda ts: _wsum(ts[0].sum(axis=1)), [(3, 4, 2)], seed=20)


def test_grad_sum_keepdims():
    _run(lambda ts: _wsum(ts[0].sum(axis=(0, 2), keepdims=True)), [(3, 4, 2)], seed=21)


def test_grad_mean():
    _run(lambda ts: _wsum(ts[0].mean(axis=-1)), [(3, 5)], seed=22)


def test_grad_matmul():
    _run(lambda ts: _wsum(ts[0] @ ts[1]), [(3, 4), (4, 2)], seed=23, low=-1.0, high=1.0)


def test_grad_matmul_batched():
    _run(lambda ts: _wsum(ts[0] @ ts[1]), [(2, 3, 4), (2, 4, 2)], seed=24, low=-1.0, high=1.0)


def test_grad_matmul_broadcast_weights():
    # [B, L, K] @ [K, M] is the layer pattern used everywhere in the streams
    _run(lambda ts: _wsum(ts[0] @ ts[1]), [(2, 5, 3), (3, 4)], seed=25, low=-1.0, high=1.0)


# -- fused ops -------------------------------------------------------------------


def test_grad_conv2d_depthwise():
    _run(
        lambda ts: _wsum(T.conv2d_depthwise(ts[0], ts[1])),
        [(2, 3, 5, 4), (3, 1, 3, 3)],
        seed=26,
        low=-1.0,
        high=1.0,
    )


def test_grad_layer_norm():
    _run(
        lambda ts: _wsum(T.layer_norm(ts[0], ts[1], ts[2])),
        [(4, 6), (6,), (6,)],
        seed=27,
    )


def test_grad_log_softmax():
    _run(lambda ts: _wsum(T.log_softmax(ts[0], axis=-1)), [(4, 5)], seed=28)


def test_grad_linear_recurrence_sequential():
    def fn(ts):
        h = T.linear_recurrence(ts[0], ts[1], ts[2], parallel=False)
        return _wsum(h)

    _run(fn, [(2, 6, 3), (2, 6, 3), (2, 3)], seed=29, low=-0.9, high=0.9)


def test_grad_linear_recurrence_parallel():
    def fn(ts):
        h = T.linear_recurrence(ts[0], ts[1], ts[2], parallel=True)
        return _wsum(h)

    _run(fn, [(2, 6, 3), (2, 6, 3), (2, 3)], seed=30, low=-0.9, high=0.9)


def test_grad_linear_recurrence_long_parallel_f64():
    # Long enough to exercise the tree path (>= PARALLEL_MIN_LEN), f64 only
    # because 40*3 central differences per probe add up.
    rng = np.random.default_rng(31)
    L = T.PARALLEL_MIN_LEN + 8
    tensors = [
        Tensor(rng.uniform(-0.9, 0.9, size=(1, L, 2)), requires_grad=True),
        Tensor(rng.standard_normal((1, L, 2)), requires_grad=True),
        Tensor(rng.standard_normal((1, 2)), requires_grad=True),
    ]

    def fn(ts):
        return _wsum(T.linear_recurrence(ts[0], ts[1], ts[2], parallel=True))

    assert gradcheck(fn, tensors, tol=1e-6) <= 1e-6


# -- harness sanity ---------------------------------------------------------------


def test_gradcheck_catches_wrong_gradient():
    # A deliberately broken gradient must trip the checker.
    def bad_op(a: Tensor) -> Tensor:
        def grad_fn(g):
            return (3.0 * g,)  # wrong: claims d(2x)/dx = 3

        return T._result(a.data * 2.0, (a,), grad_fn, "bad")

    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(AssertionError):
        gradcheck(lambda ts: bad_op(ts[0]).sum(), [x])


def test_numerical_grad_quadratic():
    x = Tensor(np.asarray([1.0, -2.0, 0.5]), requires_grad=True)
    num = numerical_grad(lambda ts: (ts[0] * ts[0]).sum(), [x], wrt=0)
    np.testing.assert_allclose(num, 2 * x.data, rtol=1e-7)


def test_rel_error_scale_free():
    a = np.asarray([1e6, 2e6])
    assert rel_error(a, a * (1 + 1e-9)) < 1e-8
