"""Randomized finite-difference cases, one entry per differentiable op.

Each case builds, from a seeded generator, a scalar-valued closure plus the
tensors to differentiate. The FD oracle (`numerics.gradcheck`) is independent
of the backward implementation: it only calls forward. Shared between the
unit tests (small seed count) and the acceptance gate (100 cases per op).

Inputs are kept away from kinks (relu at 0, |x| near 0 for odd powers) so the
central-difference oracle itself is trustworthy at h=1e-5.
"""

from __future__ import annotations

import numpy as np

from deskvoice import numerics as nm


def _away_from_zero(rng, shape, low=0.2, high=1.5):
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _p(rng, shape, positive=False, away=False):
    if positive:
        data = rng.uniform(0.2, 2.0, size=shape)
    elif away:
        data = _away_from_zero(rng, shape)
    else:
        data = rng.standard_normal(shape)
    return nm.Tensor(data, requires_grad=True)


def case_add(rng):
    a, b = _p(rng, (2, 3)), _p(rng, (3,))
    return lambda: nm.reduce_sum(nm.add(a, b) ** 2.0), [a, b]


def case_sub(rng):
    a, b = _p(rng, (2, 3)), _p(rng, (2, 3))
    return lambda: nm.reduce_sum(nm.sub(a, b) ** 2.0), [a, b]


def case_mul(rng):
    a, b = _p(rng, (4, 3)), _p(rng, (3,))
    return lambda: nm.reduce_sum(nm.mul(a, b)), [a, b]


def case_div(rng):
    a, b = _p(rng, (3, 3)), _p(rng, (3, 3), away=True)
    return lambda: nm.reduce_sum(a / b), [a, b]


def case_power(rng):
    a = _p(rng, (5,), positive=True)
    return lambda: nm.reduce_sum(a ** 1.7), [a]


def case_exp(rng):
    a = _p(rng, (2, 4))
    return lambda: nm.reduce_sum(nm.exp(a)), [a]


def case_log(rng):
    a = _p(rng, (6,), positive=True)
    return lambda: nm.reduce_sum(nm.log(a) ** 2.0), [a]


def case_tanh(rng):
    a = _p(rng, (3, 3))
    return lambda: nm.reduce_sum(nm.tanh(a) ** 2.0), [a]


def case_sigmoid(rng):
    a = _p(rng, (7,))
    return lambda: nm.reduce_sum(nm.sigmoid(a) ** 2.0), [a]


def case_relu(rng):
    a = _p(rng, (4, 3), away=True)
    return lambda: nm.reduce_sum(nm.relu(a) ** 2.0), [a]


def case_gelu(rng):
    a = _p(rng, (5,))
    return lambda: nm.reduce_sum(nm.gelu(a)), [a]


def case_sum_axis(rng):
    a = _p(rng, (2, 3, 2))
    return lambda: nm.reduce_sum(nm.reduce_sum(a, axis=1) ** 2.0), [a]


def case_mean(rng):
    a = _p(rng, (3, 4))
    return lambda: nm.reduce_sum(nm.reduce_mean(a, axis=-1, keepdims=True) ** 2.0), [a]


def case_reshape(rng):
    a = _p(rng, (2, 6))
    return lambda: nm.reduce_sum(nm.reshape(a, (3, 4)) ** 2.0), [a]


def case_swapaxes(rng):
    a = _p(rng, (2, 3, 4))
    return lambda: nm.reduce_sum(nm.swapaxes(a, -1, -2) ** 2.0), [a]


def case_slice(rng):
    a = _p(rng, (4, 5))
    return lambda: nm.reduce_sum(a[1:3, ::2] ** 2.0), [a]


def case_concat(rng):
    a, b = _p(rng, (2, 3)), _p(rng, (1, 3))
    return lambda: nm.reduce_sum(nm.concat([a, b], axis=0) ** 2.0), [a, b]


def case_pad(rng):
    a = _p(rng, (3, 2))
    return lambda: nm.reduce_sum(nm.pad_axis(a, 0, 1, 2) ** 2.0), [a]


def case_expand(rng):
    a = _p(rng, (3, 1))
    return lambda: nm.reduce_sum(nm.expand(a, (2, 3, 4)) ** 2.0), [a]


def case_repeat_rows(rng):
    a = _p(rng, (2, 3))
    return lambda: nm.reduce_sum(nm.repeat_rows(a, 3) ** 2.0), [a]


def case_upsample(rng):
    a = _p(rng, (2, 3, 2))
    return lambda: nm.reduce_sum(nm.upsample_repeat(a, 2, axis=1) ** 2.0), [a]


def case_matmul_2d(rng):
    a, b = _p(rng, (5, 4)), _p(rng, (4, 3))
    return lambda: nm.reduce_sum(nm.matmul(a, b) ** 2.0), [a, b]


def case_matmul_batched(rng):
    a, b = _p(rng, (2, 3, 4)), _p(rng, (2, 4, 2))
    return lambda: nm.reduce_sum(nm.matmul(a, b) ** 2.0), [a, b]


def case_matmul_weight(rng):
    a, w = _p(rng, (2, 3, 4)), _p(rng, (4, 3))
    return lambda: nm.reduce_sum(nm.matmul(a, w) ** 2.0), [a, w]


def case_embedding(rng):
    table = _p(rng, (6, 4))
    ids = rng.integers(0, 6, size=(2, 3))
    return lambda: nm.reduce_sum(nm.embedding(table, ids) ** 2.0), [table]


def case_softmax(rng):
    a = _p(rng, (6,))
    w = nm.Tensor(rng.standard_normal(6))
    return lambda: nm.reduce_sum(nm.mul(nm.softmax(a), w)), [a]


def case_log_softmax(rng):
    a = _p(rng, (2, 5))
    w = nm.Tensor(rng.standard_normal((2, 5)))
    return lambda: nm.reduce_sum(nm.mul(nm.log_softmax(a), w)), [a]


def case_layer_norm(rng):
    x = _p(rng, (3, 5))
    gain, bias = _p(rng, (5,)), _p(rng, (5,))
    return lambda: nm.reduce_sum(nm.layer_norm(x, gain, bias) ** 2.0), [x, gain, bias]


def case_attention(rng):
    q, k, v = _p(rng, (2, 3, 4)), _p(rng, (2, 3, 4)), _p(rng, (2, 3, 4))
    mask = np.triu(np.full((3, 3), -1e9), k=1)
    return lambda: nm.reduce_sum(nm.attention(q, k, v, mask) ** 2.0), [q, k, v]


def case_conv1d(rng):
    x, k = _p(rng, (2, 6, 3)), _p(rng, (3, 3, 2))
    b = _p(rng, (2,))
    return lambda: nm.reduce_sum(nm.conv1d(x, k, b) ** 2.0), [x, k, b]


def case_conv1d_stride(rng):
    x, k = _p(rng, (1, 8, 2)), _p(rng, (4, 2, 3))
    return lambda: nm.reduce_sum(nm.conv1d(x, k, stride=2, padding="valid") ** 2.0), [x, k]


def case_depthwise_conv1d(rng):
    x, k = _p(rng, (2, 7, 3)), _p(rng, (5, 3))
    return lambda: nm.reduce_sum(nm.depthwise_conv1d(x, k) ** 2.0), [x, k]


def case_dropout(rng):
    a = _p(rng, (4, 4))
    seed = int(rng.integers(0, 2 ** 31))

    def f():
        drop_rng = np.random.default_rng(seed)
        return nm.reduce_sum(nm.dropout(a, 0.4, drop_rng) ** 2.0)
    return f, [a]


ALL_CASES = [(name[5:], fn) for name, fn in sorted(globals().items())
             if name.startswith("case_")]


def run_battery(seeds_per_op: int, tol: float = 1e-4):
    """Run every case at 64-bit; returns (worst_err, failures list)."""
    worst = 0.0
    failures = []
    with nm.gradcheck_mode():
        for name, build in ALL_CASES:
            for seed in range(seeds_per_op):
                rng = np.random.default_rng(1000 * seeds_per_op + seed)
                f, params = build(rng)
                err = nm.check_gradients(f, params)
                worst = max(worst, err)
                if err >= tol:
                    failures.append((name, seed, err))
    return worst, failures
