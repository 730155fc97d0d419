"""Gradient-check suites, one function per op family.

Each family builds a small float64 problem from a seeded generator and
returns the worst relative error between reverse-mode and central-difference
gradients. Inputs stay in the non-saturating range of every nonlinearity so
that finite-difference roundoff does not swamp tiny true gradients.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, grad_check, parameters_grad_check
from .losses import bce_with_logits, seg_ce
from .nets import Discriminator, Head, Module
from .selectors import DdsmParams, DusmParams, ddsm, dusm, select

TOLERANCE = 1e-4


def _weights(rng, shape) -> np.ndarray:
    return rng.normal(size=shape)


def _contract(y: Tensor, w: np.ndarray) -> Tensor:
    """Scalar <y, w> with a fixed random w, so every output element matters."""
    return dc.reduce("sum", y * Tensor(w))


def _f64(module: Module) -> Module:
    return module.astype(np.float64)


def elementwise(rng) -> float:
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    w = _weights(rng, (3, 4))
    bt = Tensor(b)
    pt = Tensor(pos)

    def f(x):
        y = dc.add(x, bt) + dc.sub(x, bt) * dc.mul(x, bt) + dc.div(x, pt)
        y = y + dc.exp(dc.scale(x, 0.5)) + dc.log(pt + dc.mul(x, x))
        y = y + dc.sigmoid(x) + dc.tanh(dc.scale(x, 0.5)) + dc.leaky_relu(x, 0.2) + dc.relu(x)
        return _contract(dc.neg(y), w)

    return grad_check(f, a)


def linear_algebra(rng) -> float:
    k = int(rng.choice([1, 3, 4]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.choice([0, 1]))
    x = rng.normal(size=(2, 2, 6, 6)) * 0.3
    wk = rng.normal(size=(3, 2, k, k)) * 0.3
    bias = rng.normal(size=(3,))
    a = rng.normal(size=(4, 5))
    m = rng.normal(size=(5, 3))
    ho = dc.conv_output_size(6, k, stride, pad)
    wc = _weights(rng, (2, 3, ho, ho))
    wm = _weights(rng, (4, 3))
    errs = [
        grad_check(lambda t: _contract(dc.conv2d(t, Tensor(wk), Tensor(bias), stride, pad), wc), x),
        grad_check(lambda t: _contract(dc.conv2d(Tensor(x), t, Tensor(bias), stride, pad), wc), wk),
        grad_check(lambda t: _contract(dc.conv2d(Tensor(x), Tensor(wk), t, stride, pad), wc), bias),
        grad_check(lambda t: _contract(dc.matmul(t, Tensor(m)), wm), a),
        grad_check(lambda t: _contract(dc.matmul(Tensor(a), t), wm), m),
    ]
    return max(errs)


def reduction_shape(rng) -> float:
    x = rng.normal(size=(2, 3, 4))
    w_soft = _weights(rng, (2, 3, 4))
    w_cat = _weights(rng, (2, 5, 4))

    def f(t):
        s = dc.reduce("sum", t, axes=1)
        mu = dc.reduce("mean", t, axes=(0, 2), keepdims=True)
        mx = dc.reduce("max", t, axes=2)
        sm = _contract(dc.softmax(t, axis=1), w_soft) + _contract(dc.log_softmax(t, axis=-1), w_soft)
        cat = dc.concat([t, dc.slice_axis(t, 1, 1, 3)], axis=1)
        moved = dc.transpose(dc.reshape(cat, (2, 20)), (1, 0))
        padded = dc.pad_channels(dc.reshape(t, (2, 3, 2, 2)), 2)
        return (
            dc.reduce("sum", s * s)
            + dc.reduce("sum", mu * mu)
            + dc.reduce("sum", mx)
            + sm
            + _contract(dc.transpose(moved, (1, 0)).reshape((2, 5, 4)), w_cat)
            + dc.reduce("sum", padded * padded)
        )

    return grad_check(f, x)


def upsample(rng) -> float:
    h, w = (int(v) for v in rng.integers(2, 5, size=2))
    x = rng.normal(size=(1, 2, h, w))
    out = (8 * h, 8 * w)
    wu = _weights(rng, (1, 2) + out)
    return grad_check(lambda t: _contract(dc.upsample_bilinear(t, out), wu), x)


def losses(rng) -> float:
    logits = rng.normal(size=(2, 2, 4, 4))
    labels = rng.integers(0, 2, size=(2, 4, 4))
    d = rng.normal(size=(1, 1, 3, 3))
    target = float(rng.integers(0, 2))
    return max(
        grad_check(lambda t: seg_ce(t, labels), logits),
        grad_check(lambda t: bce_with_logits(t, target), d),
    )


def _pair(rng, c=4, h=3, w=3):
    return rng.normal(size=(2, c, h, w)) * 0.5, rng.normal(size=(2, c, h, w)) * 0.5


def ddsm_path(rng) -> float:
    fs, ft = _pair(rng)
    params = _f64(DdsmParams(rng, 4, 2))
    w1, w2 = _weights(rng, fs.shape), _weights(rng, ft.shape)

    def loss(a: Tensor, b: Tensor) -> Tensor:
        o_s, o_t = ddsm(a, b, params)
        return _contract(o_s, w1) + _contract(o_t, w2)

    errs = [
        grad_check(lambda t: loss(t, Tensor(ft)), fs),
        grad_check(lambda t: loss(Tensor(fs), t), ft),
        parameters_grad_check(lambda: loss(Tensor(fs), Tensor(ft)), params.parameters()),
    ]
    return max(errs)


def dusm_path(rng) -> float:
    fs, ft = _pair(rng)
    params = _f64(DusmParams(rng, 4, 2, scaled=bool(rng.integers(2))))
    w1 = _weights(rng, (2, 2, 3, 3))
    w2 = _weights(rng, (2, 2, 3, 3))

    def loss(a: Tensor, b: Tensor) -> Tensor:
        o_s, o_t = dusm(a, b, params)
        return _contract(o_s, w1) + _contract(o_t, w2)

    errs = [
        grad_check(lambda t: loss(t, Tensor(ft)), fs),
        grad_check(lambda t: loss(Tensor(fs), t), ft),
        parameters_grad_check(lambda: loss(Tensor(fs), Tensor(ft)), params.parameters()),
    ]
    return max(errs)


def end_to_end(rng) -> float:
    """DDSM + DUSM + both heads + pixel cross-entropy, w.r.t. features and every weight."""
    fs, ft = _pair(rng, c=4, h=2, w=2)
    dd = _f64(DdsmParams(rng, 4, 2))
    du = _f64(DusmParams(rng, 4, 2, scaled=True))
    h_s = _f64(Head(rng, 6, hidden=5))
    h_t = _f64(Head(rng, 6, hidden=5))
    labels = rng.integers(0, 2, size=(2, 16, 16))

    def loss(a: Tensor, b: Tensor) -> Tensor:
        o_s, o_t = select(a, b, dd, du, use_ddsm=True, use_dusm=True)
        return seg_ce(h_s(o_s.ds2), labels) + seg_ce(h_t(o_t.ds2), labels)

    params = dd.parameters() + du.parameters() + h_s.parameters() + h_t.parameters()
    errs = [
        grad_check(lambda t: loss(t, Tensor(ft)), fs),
        grad_check(lambda t: loss(Tensor(fs), t), ft),
        parameters_grad_check(lambda: loss(Tensor(fs), Tensor(ft)), params),
    ]
    return max(errs)


def discriminator(rng) -> float:
    disc = _f64(Discriminator(rng, 2))
    for p in disc.parameters():
        p.data *= 0.5
    f = rng.normal(size=(1, 2, 12, 12))
    target = float(rng.integers(0, 2))
    return grad_check(lambda t: bce_with_logits(disc(t), target), f)


FAMILIES: dict[str, Callable[[np.random.Generator], float]] = {
    "elementwise": elementwise,
    "linear_algebra": linear_algebra,
    "reduction_shape": reduction_shape,
    "upsample": upsample,
    "losses": losses,
    "ddsm": ddsm_path,
    "dusm": dusm_path,
    "end_to_end": end_to_end,
    "discriminator": discriminator,
}


@dataclass
class FamilyResult:
    family: str
    seeds: int
    worst: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE


def run_family(name: str, seeds: int = 20) -> FamilyResult:
    fn = FAMILIES[name]
    t0 = time.perf_counter()
    worst = 0.0
    for s in range(seeds):
        worst = max(worst, fn(np.random.default_rng([s, 7919])))
    return FamilyResult(name, seeds, worst, time.perf_counter() - t0)


def run_suite(seeds: int = 20, families=None) -> list[FamilyResult]:
    return [run_family(name, seeds) for name in (families or FAMILIES)]
