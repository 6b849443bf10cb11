"""Finite-difference checks for every differentiable op, plus the batch-pool stop-gradient.

Each registered op gets a builder that draws one random instance and returns
``(fn, x)`` where ``fn`` maps a tensor to a scalar. Non-scalar op outputs are
reduced with a fixed random projection so that every output element carries a
distinct weight in the check.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .boxes import Box
from .detection_layers import batch_pool, channel_concat, roi_pool, roi_pool_many, stack, take
from .tensor import (IGNORE, Tensor, _result, add, concat, conv2d, fully_connected, global_avg_pool,
                     grad_check, max_pool2d, relu, scale, softmax_cross_entropy, tsum)

TOLERANCE = 1e-4


def project(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(out * weights)`` with ``weights`` held constant."""
    return _result(np.asarray((out.data * weights).sum()), (out,), lambda g: (g * weights,))


def _projected(op: Callable[[Tensor], Tensor], out_shape, rng) -> Callable[[Tensor], Tensor]:
    w = rng.normal(size=out_shape)
    return lambda t: project(op(t), w)


def _away_from_zero(rng, shape, gap=1e-2):
    """Normal draws, redrawing any that land within ``gap`` of the relu kink."""
    x = rng.normal(size=shape)
    near = np.abs(x) < gap
    while near.any():
        x[near] = rng.normal(size=int(near.sum()))
        near = np.abs(x) < gap
    return x


def _distinct(rng, shape):
    """Values whose pairwise gaps are far larger than the finite-difference step."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape)


def _add(rng, i):
    shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
    other = Tensor(rng.normal(size=shape))
    return _projected(lambda t: add(t, other), shape, rng), rng.normal(size=shape)


def _scale(rng, i):
    shape = tuple(rng.integers(1, 5, size=2))
    k = float(rng.normal())
    return _projected(lambda t: scale(t, k), shape, rng), rng.normal(size=shape)


def _tsum(rng, i):
    return tsum, rng.normal(size=tuple(rng.integers(1, 5, size=3)))


def _conv2d(rng, i):
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(3, 7, size=2)
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.normal(size=(n, c, h, w))
    wt = rng.normal(size=(o, c, 3, 3))
    b = rng.normal(size=o)
    out_shape = conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, pad).shape
    which = i % 3  # rotate the differentiated argument: input, weight, bias
    if which == 0:
        op = lambda t: conv2d(t, Tensor(wt), Tensor(b), stride, pad)
        return _projected(op, out_shape, rng), x
    if which == 1:
        op = lambda t: conv2d(Tensor(x), t, Tensor(b), stride, pad)
        return _projected(op, out_shape, rng), wt
    op = lambda t: conv2d(Tensor(x), Tensor(wt), t, stride, pad)
    return _projected(op, out_shape, rng), b


def _fully_connected(rng, i):
    n, d, k = rng.integers(1, 4), rng.integers(1, 6), rng.integers(1, 5)
    x = rng.normal(size=(n, d))
    wt = rng.normal(size=(k, d))
    b = rng.normal(size=k)
    which = i % 3
    if which == 0:
        return _projected(lambda t: fully_connected(t, Tensor(wt), Tensor(b)), (n, k), rng), x
    if which == 1:
        return _projected(lambda t: fully_connected(Tensor(x), t, Tensor(b)), (n, k), rng), wt
    return _projected(lambda t: fully_connected(Tensor(x), Tensor(wt), t), (n, k), rng), b


def _relu(rng, i):
    shape = tuple(rng.integers(1, 5, size=3))
    return _projected(relu, shape, rng), _away_from_zero(rng, shape)


def _max_pool2d(rng, i):
    k = int(rng.integers(2, 4))
    stride = k if i % 2 == 0 else k - 1  # disjoint and overlapping windows
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(k, 8)), int(rng.integers(k, 8)))
    out_shape = max_pool2d(Tensor(np.zeros(shape)), k, stride).shape
    return _projected(lambda t: max_pool2d(t, k, stride), out_shape, rng), _distinct(rng, shape)


def _global_avg_pool(rng, i):
    shape = tuple(rng.integers(1, 5, size=4))
    return _projected(global_avg_pool, shape[:2], rng), rng.normal(size=shape)


def _softmax_cross_entropy(rng, i):
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 5))
    labels = rng.integers(0, k, size=n)
    labels[rng.random(n) < 0.25] = IGNORE
    labels[0] = rng.integers(0, k)  # at least one counted row
    return (lambda t: softmax_cross_entropy(t, labels)), rng.normal(size=(n, k))


def _concat(rng, i):
    axis = int(rng.integers(0, 2))
    base = list(rng.integers(1, 4, size=2))
    other_shape = base.copy()
    other_shape[axis] = int(rng.integers(1, 4))
    other = Tensor(rng.normal(size=other_shape))
    out_shape = np.concatenate([np.zeros(base), other.data], axis=axis).shape
    return _projected(lambda t: concat([t, other], axis), out_shape, rng), rng.normal(size=base)


def _roi_pool(rng, i):
    c, h, w = int(rng.integers(1, 3)), int(rng.integers(4, 9)), int(rng.integers(4, 9))
    scale_ = float(rng.choice([1.0, 0.5, 0.25]))
    rois = []
    for _ in range(int(rng.integers(1, 4))):
        x0, x1 = np.sort(rng.uniform(0, w / scale_, 2))
        y0, y1 = np.sort(rng.uniform(0, h / scale_, 2))
        rois.append(Box(x0, y0, x1 + 1e-3, y1 + 1e-3))
    oh, ow = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    if i % 2 == 0:
        op = lambda t: roi_pool_many(t, rois, oh, ow, scale_)
        out_shape = (len(rois), c, oh, ow)
    else:
        op = lambda t: roi_pool(t, rois[0], oh, ow, scale_)
        out_shape = (c, oh, ow)
    return _projected(op, out_shape, rng), _distinct(rng, (c, h, w))


def _take(rng, i):
    shape = tuple(rng.integers(1, 4, size=3))
    idx = int(rng.integers(0, shape[0]))
    return _projected(lambda t: take(t, idx), shape[1:], rng), rng.normal(size=shape)


def _stack(rng, i):
    shape = tuple(rng.integers(1, 4, size=2))
    other = Tensor(rng.normal(size=shape))
    return _projected(lambda t: stack([other, t]), (2, *shape), rng), rng.normal(size=shape)


def _channel_concat(rng, i):
    h, w = rng.integers(1, 4, size=2)
    c1, c2 = rng.integers(1, 4, size=2)
    other = Tensor(rng.normal(size=(c2, h, w)))
    op = lambda t: channel_concat([t, other] if i % 2 == 0 else [other, t])
    return _projected(op, (c1 + c2, h, w), rng), rng.normal(size=(c1, h, w))


OPS: dict[str, Callable] = {
    "add": _add,
    "scale": _scale,
    "tsum": _tsum,
    "conv2d": _conv2d,
    "fully_connected": _fully_connected,
    "relu": _relu,
    "max_pool2d": _max_pool2d,
    "global_avg_pool": _global_avg_pool,
    "softmax_cross_entropy": _softmax_cross_entropy,
    "concat": _concat,
    "roi_pool": _roi_pool,
    "take": _take,
    "stack": _stack,
    "channel_concat": _channel_concat,
}

BLOCKED = "blocked (exact zero)"


@dataclass
class OpReport:
    op: str
    instances: int
    max_rel_error: float
    status: str

    @property
    def ok(self) -> bool:
        return self.status in ("pass", BLOCKED)

    def as_dict(self) -> dict:
        return {"op": self.op, "instances": self.instances, "max_rel_error": self.max_rel_error,
                "status": self.status}


def check_op(name: str, instances: int = 20, seed: int = 0, eps: float = 1e-5,
             tol: float = TOLERANCE) -> OpReport:
    rng = np.random.default_rng([seed, sorted(OPS).index(name)])
    worst = 0.0
    for i in range(instances):
        fn, x = OPS[name](rng, i)
        worst = max(worst, grad_check(fn, x, eps, name))
    return OpReport(name, instances, worst, "pass" if worst < tol else "FAIL")


def check_batch_pool(instances: int = 20, seed: int = 0) -> OpReport:
    """Forward equals the brute-force elementwise max; backward leaves exact zeros."""
    rng = np.random.default_rng([seed, len(OPS)])
    for _ in range(instances):
        n = int(rng.integers(1, 6))
        shape = tuple(rng.integers(1, 4, size=3))
        maps = [Tensor(rng.normal(size=shape), requires_grad=True) for _ in range(n)]
        out = batch_pool(maps)
        expected = maps[0].data.copy()
        for m in maps[1:]:
            expected = np.where(m.data > expected, m.data, expected)
        if not np.array_equal(out.data, expected):
            return OpReport("batch_pool", instances, float("nan"), "FAIL (forward)")
        project(out, rng.normal(size=shape)).backward()
        if any(m.grad is None or np.any(m.grad != 0.0) for m in maps):
            return OpReport("batch_pool", instances, float("nan"), "FAIL (gradient leaked)")
    return OpReport("batch_pool", instances, 0.0, BLOCKED)


def run_suite(instances: int = 20, seed: int = 0) -> tuple[list[OpReport], float]:
    """Every registered op plus batch_pool; returns the reports and elapsed seconds."""
    t0 = time.perf_counter()
    reports = [check_op(name, instances, seed) for name in OPS]
    reports.append(check_batch_pool(instances, seed))
    return reports, time.perf_counter() - t0
