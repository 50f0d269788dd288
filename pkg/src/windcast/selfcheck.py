"""64-bit finite-difference suite over every differentiable op and a tiny model."""

from __future__ import annotations

import time

import numpy as np

from windcast.abed import AbedConfig, build_model, forward, rssab_forward
from windcast.tensor import (
    Tensor,
    add,
    batchnorm,
    conv3d,
    mul,
    pad_crop_spatial,
    relu,
    sigmoid,
    spatial_mean,
    sub,
    upsample2x_spatial,
)
from windcast.tensor import sum as tsum
from windcast.tensor import grad_check

TOLERANCE = 1e-4
TINY = AbedConfig(stem_channels=4, encoder_channels=(4, 8), n_rssab=1)


def _readout(out_fn, shape, rng):
    g = Tensor(rng.normal(size=shape))
    return lambda: tsum(mul(out_fn(), g))


def _param(rng, *shape, away_from_zero=False):
    x = rng.normal(size=shape)
    if away_from_zero:
        # keep finite differences off the relu kink
        x = np.where(np.abs(x) < 0.05, 0.3, x)
    return Tensor(x, requires_grad=True)


def op_cases(seed=0):
    """``{name: (f, params)}`` for every differentiable op."""
    rng = np.random.default_rng(seed)
    cases = {}
    a, b = _param(rng, 2, 3, 4), _param(rng, 2, 3, 4)
    cases["add"] = (_readout(lambda: add(a, b), a.shape, rng), [a, b])
    c, d = _param(rng, 3, 4), _param(rng, 1, 4)
    cases["sub(broadcast)"] = (_readout(lambda: sub(c, d), c.shape, rng), [c, d])
    e, f_ = _param(rng, 2, 5), _param(rng, 2, 5)
    cases["mul"] = (_readout(lambda: mul(e, f_), e.shape, rng), [e, f_])
    s = _param(rng, 3, 3)
    cases["sum"] = (lambda: tsum(mul(s, s)), [s])
    z = _param(rng, 4, 6)
    cases["sigmoid"] = (_readout(lambda: sigmoid(z), z.shape, rng), [z])
    r = _param(rng, 4, 6, away_from_zero=True)
    cases["relu"] = (_readout(lambda: relu(r), r.shape, rng), [r])

    x = _param(rng, 2, 3, 4, 5, 5)
    w = _param(rng, 4, 3, 3, 3, 3)
    bias = _param(rng, 4)
    cases["conv3d(same)"] = (_readout(lambda: conv3d(x, w, bias, 1, 1), (2, 4, 4, 5, 5), rng), [x, w, bias])
    cases["conv3d(stride 1,2,2)"] = (
        _readout(lambda: conv3d(x, w, bias, (1, 2, 2), 1), (2, 4, 4, 3, 3), rng), [x, w, bias])
    w1 = _param(rng, 2, 3, 1, 1, 1)
    cases["conv3d(1x1x1)"] = (_readout(lambda: conv3d(x, w1, None, 1, 0), (2, 2, 4, 5, 5), rng), [x, w1])

    xb = _param(rng, 3, 4, 2, 3, 3)
    gamma, beta = _param(rng, 4), _param(rng, 4)
    rm, rv = np.zeros(4), np.ones(4)

    def bn_train():
        saved = rm.copy(), rv.copy()
        out = batchnorm(xb, gamma, beta, rm, rv, True)
        rm[...], rv[...] = saved
        return out

    cases["batchnorm(train)"] = (_readout(bn_train, xb.shape, rng), [xb, gamma, beta])
    rm2, rv2 = rng.normal(size=4), rng.uniform(0.5, 2, size=4)
    cases["batchnorm(infer)"] = (
        _readout(lambda: batchnorm(xb, gamma, beta, rm2, rv2, False), xb.shape, rng), [xb, gamma, beta])

    xs = _param(rng, 2, 3, 4, 5, 6)
    cases["spatial_mean"] = (_readout(lambda: spatial_mean(xs), (2, 3, 4, 1, 1), rng), [xs])
    cases["upsample2x_spatial"] = (_readout(lambda: upsample2x_spatial(xs), (2, 3, 4, 10, 12), rng), [xs])
    cases["pad_crop_spatial(crop)"] = (_readout(lambda: pad_crop_spatial(xs, 3, 4), (2, 3, 4, 3, 4), rng), [xs])
    cases["pad_crop_spatial(pad)"] = (_readout(lambda: pad_crop_spatial(xs, 7, 9), (2, 3, 4, 7, 9), rng), [xs])
    return cases


def model_cases(seed=0):
    rng = np.random.default_rng(seed)
    cases = {}
    m = build_model(TINY, seed=1, dtype=np.float64)
    x = Tensor(rng.normal(size=(1, 14, 6, 8, 8)))
    rm, rv = m.buffers["bn0.running_mean"], m.buffers["bn0.running_var"]
    g = Tensor(rng.normal(size=(1, 2, 6, 8, 8)))

    def full():
        saved = rm.copy(), rv.copy()
        out = tsum(mul(forward(m, x, "train"), g))
        rm[...], rv[...] = saved
        return out

    cases["abed tiny model (b=1,t=6,8x8,[4,8],N=1)"] = (full, m.parameters())
    f_in = Tensor(rng.normal(size=(1, 8, 3, 4, 4)), requires_grad=True)
    params = [v for k, v in m.params.items() if k.startswith("rssab0.")] + [f_in]
    cases["rssab block"] = (_readout(lambda: rssab_forward(m, 0, f_in), f_in.shape, rng), params)
    return cases


def run(n_samples=40, seed=0):
    """Return ``[(name, max_rel_err, seconds)]`` for the whole suite."""
    rows = []
    for name, (fn, params) in {**op_cases(seed), **model_cases(seed)}.items():
        t0 = time.perf_counter()
        err = grad_check(fn, params, n_samples=n_samples)
        rows.append((name, err, time.perf_counter() - t0))
    return rows
