"""Small reverse-mode autodiff over numpy arrays.

The tape is recorded at layer granularity: every op produces a ``Tensor``
that remembers its parents and a closure that pushes the output gradient
back into them. Feature maps are laid out channels x height x width with an
optional leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64  # default for non-float input; float32 arrays stay float32


class DimensionError(ValueError):
    """Raised when operand shapes do not agree."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate ``grad`` (default: ones, i.e. d self / d self) to every ancestor."""
        if grad is None:
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # intermediate grads live only for this call; leaves keep theirs
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.dtype != parent.data.dtype:  # keep mixed precision off the slow matmul path
                    pg = pg.astype(parent.data.dtype)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, k: float) -> Tensor:
        return scale(self, k)

    __rmul__ = __mul__


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_batch(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise DimensionError(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, k: float) -> Tensor:
    return _result(a.data * k, (a,), lambda g: (g * k,))


def tsum(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of a [C,H,W] (or [N,C,H,W]) map with [O,C,kH,kW] filters."""
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    xb, squeeze = _as_batch(x.data, 3)
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be [C_out,C_in,kH,kW], got {weight.shape}")
    n, c, h, w = xb.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d: input channels {c} != weight C_in {ci}")
    if bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} exceeds padded input H={hp}, W={wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    # channel-major padded copy: rows are (c, ki, kj), columns are (n, y, x)
    xc = np.zeros((c, n, hp, wp), dtype=xb.dtype)
    xc[:, :, pad:pad + h, pad:pad + w] = xb.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xc.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3) + bias.data[:, None, None]

    def backward(g):
        gb = g[None] if squeeze else g
        gmat = np.ascontiguousarray(gb.transpose(1, 0, 2, 3)).reshape(o, -1)
        dw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        db = gmat.sum(axis=1) if bias.requires_grad else None
        if not x.requires_grad:
            return None, dw, db
        dcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
        dxc = np.zeros_like(xc)
        for i in range(kh):
            for j in range(kw):
                dxc[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
        dx = dxc[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3)
        return (dx[0] if squeeze else dx), dw, db

    return _result(out[0] if squeeze else out, (x, weight, bias), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``out[k] = sum_d weight[k, d] * x[d] + bias[k]``; x may carry a batch axis."""
    xb, squeeze = _as_batch(x.data, 1)
    if weight.ndim != 2 or weight.shape[1] != xb.shape[1]:
        raise DimensionError(f"fully_connected: weight {weight.shape} vs input length {xb.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"fully_connected: bias {bias.shape} vs {weight.shape[0]} outputs")
    out = xb @ weight.data.T + bias.data

    def backward(g):
        gb = g[None] if squeeze else g
        dx = gb @ weight.data
        return (dx[0] if squeeze else dx), gb.T @ xb, gb.sum(axis=0)

    return _result(out[0] if squeeze else out, (x, weight, bias), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def max_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Windowed max. Gradient goes to the first row-major argmax of each window."""
    stride = k if stride is None else stride
    xb, squeeze = _as_batch(x.data, 3)
    n, c, h, w = xb.shape
    if k > h or k > w:
        raise DimensionError(f"max_pool2d: window {k} larger than input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xb, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = g[None] if squeeze else g
        dx = np.zeros_like(xb)
        ni, ci, hi, wi = np.indices(arg.shape)
        rows = hi * stride + arg // k
        cols = wi * stride + arg % k
        if stride >= k:  # windows are disjoint, no index repeats
            dx[ni, ci, rows, cols] = gb
        else:
            np.add.at(dx, (ni, ci, rows, cols), gb)
        return (dx[0] if squeeze else dx,)

    return _result(out[0] if squeeze else out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [C,H,W] -> [C] (or [N,C,H,W] -> [N,C])."""
    xb, squeeze = _as_batch(x.data, 3)
    hw = xb.shape[2] * xb.shape[3]
    out = xb.mean(axis=(2, 3))

    def backward(g):
        gb = g[None] if squeeze else g
        dx = np.broadcast_to(gb[:, :, None, None] / hw, xb.shape).copy()
        return (dx[0] if squeeze else dx,)

    return _result(out[0] if squeeze else out, (x,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


IGNORE = -1


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over rows whose label is not ``IGNORE``.

    ``logits`` is [K] with an int label, or [N,K] with an int array of labels.
    Returns a scalar tensor; rows labelled ``IGNORE`` contribute nothing.
    """
    lb, squeeze = _as_batch(logits.data, 1)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.shape != (lb.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: {labels.shape[0]} labels for {lb.shape[0]} rows")
    k = lb.shape[1]
    valid = labels != IGNORE
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k})")
    z = lb - lb.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.nonzero(valid)[0]
    count = max(len(rows), 1)
    loss = float((logsum[rows] - z[rows, labels[rows]]).sum() / count)

    def backward(g):
        d = softmax(lb)
        d[rows, labels[rows]] -= 1.0
        d[~valid] = 0.0
        d *= g / count
        return (d[0] if squeeze else d,)

    return _result(np.asarray(loss), (logits,), backward)


@dataclass
class ParamGroup:
    name: str
    params: dict[str, Tensor] = field(default_factory=dict)
    trainable: bool = True

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r} in group {self.name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __iter__(self):
        return iter(self.params.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def sgd_step(groups: Iterable[ParamGroup], grads: dict[str, np.ndarray], lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0005,
             velocity: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """In-place momentum SGD on trainable groups.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    Parameters without an entry in ``grads`` are treated as having zero gradient.
    Returns the velocity dict (pass it back in on the next call).
    """
    if velocity is None:
        velocity = {}
    for group in groups:
        if not group.trainable:
            continue
        for name, p in group.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.shape:
                raise DimensionError(f"sgd_step: grad for {name!r} has shape {g.shape}, param {p.shape}")
            v = velocity.get(name)
            step = g + weight_decay * p.data
            v = step if v is None else momentum * v + step
            velocity[name] = v
            p.data = (p.data - lr * v).astype(p.data.dtype, copy=False)
    return velocity


def grad_check(fn: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5,
               name: str = "op") -> float:
    """Largest relative disagreement between autodiff and central differences.

    ``fn`` maps a tensor to a scalar tensor. Error per element is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    x = np.array(x, dtype=DTYPE)
    t = Tensor(x, requires_grad=True)
    out = fn(t)
    if out.data.size != 1:
        raise DimensionError(f"grad_check: {name} must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = t.grad if t.grad is not None else np.zeros_like(x)
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(Tensor(x)).item()
        flat[i] = orig - eps
        fm = fn(Tensor(x)).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"grad_check: {name} produced a non-finite value near element {i}")
        numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    if not np.all(np.isfinite(analytic)):
        raise FloatingPointError(f"grad_check: {name} produced a non-finite gradient")
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Differentiable ``np.concatenate``."""
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))
