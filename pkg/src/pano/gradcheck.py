"""Finite-difference suite covering every differentiable op and every loss.

Each case builds a scalar function of one float64 input so that central
differences are not swamped by float32 rounding.  Non-scalar ops are reduced
with a fixed random weighting, which exercises every output element.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import cdam, ppam
from . import tensor as T
from .model import BnStats, SegModel, forward
from .tensor import Tensor

TOLERANCE = 1e-3
STEP = 1e-3


@dataclass
class GradCase:
    name: str
    build: Callable  # rng -> (fn, x)


def _weighted(op, shape_out, rng):
    w = Tensor(rng.normal(size=shape_out))
    return lambda x: (op(x) * w).sum()


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.sign(x) * (np.abs(x) + margin)


def _f64_model(seed=0, k=3, c=4):
    m = SegModel(num_classes=k, feat_channels=c, seed=seed, widths=(4, 4))
    for p in m.parameters():
        p.data = p.data.astype(np.float64)
    return m


def _case_matmul_a(rng):
    b = Tensor(rng.normal(size=(4, 2)))
    return _weighted(lambda x: T.matmul(x, b), (3, 2), rng), Tensor(rng.normal(size=(3, 4)))


def _case_matmul_b(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    return _weighted(lambda x: T.matmul(a, x), (3, 2), rng), Tensor(rng.normal(size=(4, 2)))


def _case_softmax(rng):
    return _weighted(T.softmax_rows, (5, 6), rng), Tensor(rng.normal(size=(5, 6)) * 2)


def _case_log(rng):
    return _weighted(T.log, (4, 5), rng), Tensor(rng.uniform(0.5, 2.0, size=(4, 5)))


def _case_exp(rng):
    return _weighted(T.exp, (4, 5), rng), Tensor(rng.normal(size=(4, 5)))


def _case_relu(rng):
    return _weighted(T.relu, (6, 6), rng), Tensor(_away_from_zero(rng, (6, 6)))


def _case_elementwise(rng):
    other = Tensor(rng.uniform(0.5, 1.5, size=(3, 4)))
    return _weighted(lambda x: (x * other + x / other - x) ** 2.0, (3, 4), rng), Tensor(rng.normal(size=(3, 4)))


def _case_division_by_input(rng):
    num = Tensor(rng.normal(size=(3, 4)))
    return _weighted(lambda x: num / x, (3, 4), rng), Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))


def _case_shape_ops(rng):
    def op(x):
        y = x.reshape(4, 6).T
        parts = T.split(y, 2, axis=0)
        return T.concat([parts[1], parts[0]], axis=1)[1:, ::2].mean(axis=0, keepdims=True)

    return _weighted(op, (1, 4), rng), Tensor(rng.normal(size=(2, 3, 4)))


def _case_conv_input(rng):
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    b = Tensor(rng.normal(size=3))
    return _weighted(lambda x: T.conv2d(x, w, b, stride=2, padding=1), (2, 3, 3, 4), rng), Tensor(
        rng.normal(size=(2, 2, 6, 8))
    )


def _case_conv_kernel(rng):
    x = Tensor(rng.normal(size=(2, 2, 6, 8)))
    return _weighted(lambda w: T.conv2d(x, w, None, stride=1, padding=1), (2, 3, 6, 8), rng), Tensor(
        rng.normal(size=(3, 2, 3, 3))
    )


def _case_conv_bias(rng):
    x = Tensor(rng.normal(size=(1, 2, 5, 5)))
    w = Tensor(rng.normal(size=(3, 2, 1, 1)))
    return _weighted(lambda b: T.conv2d(x, w, b), (1, 3, 5, 5), rng), Tensor(rng.normal(size=3))


def _bn_args(rng, c):
    return Tensor(rng.uniform(0.5, 1.5, size=c)), Tensor(rng.normal(size=c))


def _case_bn_train(rng):
    gamma, beta = _bn_args(rng, 3)

    def op(x):
        return T.batchnorm2d(x, gamma, beta, np.zeros(3), np.ones(3), training=True)

    return _weighted(op, (2, 3, 4, 4), rng), Tensor(rng.normal(size=(2, 3, 4, 4)) * 2 + 1)


def _case_bn_affine(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    beta = Tensor(rng.normal(size=3))

    def op(gamma):
        return T.batchnorm2d(x, gamma, beta, np.zeros(3), np.ones(3), training=True)

    return _weighted(op, (2, 3, 4, 4), rng), Tensor(rng.uniform(0.5, 1.5, size=3))


def _case_bn_eval(rng):
    gamma, beta = _bn_args(rng, 3)
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)

    def op(x):
        return T.batchnorm2d(x, gamma, beta, rm.copy(), rv.copy(), training=False)

    return _weighted(op, (2, 3, 4, 4), rng), Tensor(rng.normal(size=(2, 3, 4, 4)))


def _case_upsample(rng):
    return _weighted(lambda x: T.upsample_bilinear(x, (8, 7)), (2, 8, 7), rng), Tensor(rng.normal(size=(2, 3, 4)))


def _case_mse(rng):
    other = Tensor(rng.normal(size=(4, 5)))
    return (lambda x: T.mse(x, other)), Tensor(rng.normal(size=(4, 5)))


def _case_cross_entropy(rng):
    target = rng.integers(0, 4, size=(2, 3, 3))
    target[0, 0, 0] = T.IGNORE_INDEX
    return (lambda x: T.cross_entropy(x, target)), Tensor(rng.normal(size=(2, 4, 3, 3)))


def _case_forward_ce(rng):
    m = _f64_model(seed=int(rng.integers(1 << 30)))
    target = rng.integers(0, 3, size=(8, 8))
    x0 = rng.uniform(0, 1, size=(3, 8, 8))

    def fn(x):
        P, _ = forward(m, x, train_mode=False)
        return T.cross_entropy(P.reshape((1,) + P.shape), target[None])

    return fn, Tensor(x0)


def _case_loss_sup(rng):
    from .train import loss_sup

    ffp = [rng.normal(size=(3, 4, 2)) for _ in range(4)]
    return (lambda x: loss_sup(x, ffp)), Tensor(rng.normal(size=(3, 4, 8)))


def _banks_from_features(f, labels, k):
    y = np.eye(k, dtype=np.float64)[labels].transpose(2, 0, 1)
    return ppam.masked_average_pooling(f, y)


def _case_loss_ppa(rng):
    m = _f64_model(seed=int(rng.integers(1 << 30)), k=3, c=4)
    g_rows = rng.normal(size=(3, 4))
    tau_g = ppam.PrototypeBank(Tensor(g_rows), np.array([True, True, True]))
    x0 = rng.uniform(0, 1, size=(3, 8, 8))
    # fix the pseudo-label so argmax flips cannot break differentiability
    with T.no_grad():
        P0, _ = forward(m, Tensor(x0), train_mode=False)
    labels = P0.data.argmax(axis=0)

    def fn(x):
        _, f = forward(m, x, train_mode=False)
        f_up = T.upsample_bilinear(f, (8, 8))
        return ppam.loss_ppa(tau_g, _banks_from_features(f_up, labels, 3))

    return fn, Tensor(x0)


def _case_loss_sft(rng):
    k = 3
    labels = [rng.integers(0, k, size=(4, 4)) for _ in range(4)]

    def fn(x):
        banks = [_banks_from_features(x[i], labels[i], k) for i in range(4)]
        return ppam.loss_sft(banks)

    return fn, Tensor(rng.normal(size=(4, 5, 4, 4)))


def _case_loss_bns(rng):
    stats = BnStats(rng.normal(size=4), rng.uniform(0.5, 1.5, size=4))
    other = Tensor(rng.normal(size=(4, 3, 3)))
    return (lambda x: cdam.loss_bns(x, other, stats)), Tensor(rng.normal(size=(4, 3, 3)))


def _case_loss_bns_prime(rng):
    stats = BnStats(rng.normal(size=4), rng.uniform(0.5, 1.5, size=4))
    other = Tensor(rng.normal(size=(2, 4, 3, 3)))
    return (lambda x: cdam.loss_bns(other, x, stats)), Tensor(rng.normal(size=(2, 4, 3, 3)))


def _cda_features(rng):
    return rng.normal(size=(4, 2, 3)) * 0.7


def _case_loss_cda(rng):
    other = Tensor(_cda_features(rng))
    return (lambda x: cdam.cross_dual_loss(x, other)[0]), Tensor(_cda_features(rng))


def _case_loss_cda_prime(rng):
    other = Tensor(_cda_features(rng))
    return (lambda x: cdam.cross_dual_loss(other, x)[0]), Tensor(_cda_features(rng))


def _case_total(rng):
    """The weighted objective through the target model, w.r.t. its input."""
    from .train import loss_sup

    k, c = 3, 4
    m = _f64_model(seed=int(rng.integers(1 << 30)), k=k, c=c)
    x0 = rng.uniform(0, 1, size=(3, 8, 32))
    stats = BnStats(rng.normal(size=c) * 0.1, rng.uniform(0.5, 1.5, size=c))
    tau_g = ppam.PrototypeBank(Tensor(rng.normal(size=(k, c))), np.ones(k, bool))
    ffp = [rng.normal(size=(k, 8, 8)) for _ in range(4)]
    f_prime = Tensor(rng.normal(size=(c, 1, 4)))
    with T.no_grad():
        P0, _ = forward(m, Tensor(x0), train_mode=False)
    labels = P0.data.argmax(axis=0)
    lam, gamma = 100.0, 0.1

    def fn(x):
        P, f = forward(m, x, train_mode=False)
        sup = loss_sup(P, ffp)
        ppa = ppam.loss_ppa(tau_g, _banks_from_features(T.upsample_bilinear(f, (8, 32)), labels, k))
        bns = cdam.loss_bns(f, f_prime, stats)
        cda = cdam.cross_dual_loss(f, f_prime)[0]
        return ppa * lam + cda * gamma + bns + sup

    return fn, Tensor(x0)


CASES = [
    GradCase("matmul[a]", _case_matmul_a),
    GradCase("matmul[b]", _case_matmul_b),
    GradCase("softmax_rows", _case_softmax),
    GradCase("log", _case_log),
    GradCase("exp", _case_exp),
    GradCase("relu", _case_relu),
    GradCase("add/sub/mul/div/pow", _case_elementwise),
    GradCase("div[denominator]", _case_division_by_input),
    GradCase("reshape/transpose/split/concat/getitem/mean", _case_shape_ops),
    GradCase("conv2d[input]", _case_conv_input),
    GradCase("conv2d[kernel]", _case_conv_kernel),
    GradCase("conv2d[bias]", _case_conv_bias),
    GradCase("batchnorm2d[train]", _case_bn_train),
    GradCase("batchnorm2d[affine]", _case_bn_affine),
    GradCase("batchnorm2d[eval]", _case_bn_eval),
    GradCase("upsample_bilinear", _case_upsample),
    GradCase("mse", _case_mse),
    GradCase("cross_entropy", _case_cross_entropy),
    GradCase("cross_entropy∘forward", _case_forward_ce),
    GradCase("L_sup", _case_loss_sup),
    GradCase("L_ppa∘MAP∘forward", _case_loss_ppa),
    GradCase("L_sft", _case_loss_sft),
    GradCase("L_bns[F]", _case_loss_bns),
    GradCase("L_bns[F']", _case_loss_bns_prime),
    GradCase("L_cda[f]", _case_loss_cda),
    GradCase("L_cda[f']", _case_loss_cda_prime),
    GradCase("total", _case_total),
]


@dataclass
class CaseResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return math.isfinite(self.error) and self.error < TOLERANCE


def run_case(case: GradCase, seed: int = 0, step: float = STEP) -> CaseResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    fn, x = case.build(rng)
    err = T.grad_check(fn, x, step)
    return CaseResult(case.name, err, time.perf_counter() - start)


def run_suite(seed: int = 0, step: float = STEP) -> list:
    return [run_case(c, seed, step) for c in CASES]
