"""Dense arrays, differentiable primitives and a reverse-mode tape.

Layout convention (used everywhere in the package): arrays are numpy
ndarrays in C order, last axis fastest.  Token tensors are
``[..., N, A, t, d]`` (intervals, areas, interval length, embedding);
pooled area sequences are ``[..., S, d]`` with ``s = i * A + a``.

Only the primitives defined in this module are recorded on the tape, so any
function composed from them can be differentiated with :func:`grad`.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Tensor", "Tape", "set_dtype", "get_dtype", "precision", "as_tensor",
    "matmul", "add", "sub", "mul", "neg", "sum", "mean", "reshape",
    "transpose", "softmax", "log_softmax", "layernorm", "gelu",
    "masked_fill", "dropout", "gather_windows", "detach",
    "softmax_lastaxis", "avgpool_axis", "grad", "gradcheck",
    "GradcheckReport", "DegenerateRowError", "count_macs",
]

_DTYPE = np.float32
_ACTIVE_TAPE: "Tape | None" = None
_MAC_COUNTER: list[int] | None = None


class DegenerateRowError(ValueError):
    """A softmax row has no finite entry."""


def set_dtype(name) -> None:
    global _DTYPE
    dt = np.dtype(name)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    _DTYPE = dt.type


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(name):
    """Temporarily switch the global float width."""
    old = _DTYPE
    set_dtype(name)
    try:
        yield
    finally:
        set_dtype(old)


@contextlib.contextmanager
def count_macs():
    """Tally multiply-adds performed by :func:`matmul` inside the block."""
    global _MAC_COUNTER
    prev = _MAC_COUNTER
    _MAC_COUNTER = [0]
    box = _MAC_COUNTER
    try:
        yield box
    finally:
        _MAC_COUNTER = prev


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Each entry is ``(output, inputs, backward)`` where ``backward`` maps the
    output adjoint to a tuple of input adjoints (``None`` for inputs that do
    not need one).  :meth:`backward` replays entries in reverse creation order.
    """

    ops: list = field(default_factory=list)

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self.ops.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.ops):
            g = adj.pop(id(out), None)
            if g is None:
                continue
            for x, gx in zip(inputs, fn(g)):
                if gx is None or not x.requires_grad:
                    continue
                key = id(x)
                if key in adj:
                    adj[key] = adj[key] + gx
                else:
                    adj[key] = gx
        return adj


def _wrap(data, inputs: tuple, backward: Callable) -> Tensor:
    needs = any(x.requires_grad for x in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    if _MAC_COUNTER is not None:
        _MAC_COUNTER[0] += out.size * a.shape[-1]
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _wrap(out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _wrap(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _wrap(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _wrap(ad * bd, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _wrap(-a.data, (a,), lambda g: (-g,))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _wrap(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _wrap(a.data.mean(axis=axis), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _wrap(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _wrap(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def softmax(x) -> Tensor:
    """Softmax over the last axis; ``-inf`` entries map to exactly zero."""
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DegenerateRowError("softmax row without a finite entry")
    e = np.exp(x.data - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _wrap(p, (x,), backward)


softmax_lastaxis = softmax


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _wrap(out, (x,), backward)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    d = xd.shape[-1]

    def backward(g):
        gx = ggam = gbet = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggam = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbet = g.reshape(-1, d).sum(axis=0)
        return gx, ggam, gbet

    return _wrap(out, (x, gamma, beta), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh form: ``0.5 x (1 + tanh(c (x + 0.044715 x^3)))``."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3 * 0.044715 x^2)
        dx = 1.0 - th * th
        dx *= xd
        dx *= 0.5 * _GELU_C
        dx *= 1.0 + 3 * 0.044715 * x2
        dx += 0.5 * (1.0 + th)
        dx *= g
        return (dx,)

    return _wrap(out, (x,), backward)


def masked_fill(x, mask: np.ndarray, value: float) -> Tensor:
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    keep = ~mask

    def backward(g):
        return (_unbroadcast(g * keep, x.shape),)

    return _wrap(np.where(mask, _DTYPE(value), x.data), (x,), backward)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape, dtype=np.float32) >= p).astype(_DTYPE) / _DTYPE(1.0 - p)
    return _wrap(x.data * keep, (x,), lambda g: (g * keep,))


def gather_windows(x, w: int) -> Tensor:
    """Causal windows along axis -2.

    ``x`` is ``[..., S, k]``; the result is ``[..., S, w, k]`` with
    ``out[..., s, j, :] = x[..., s - w + 1 + j, :]`` and zeros where that
    index is negative.
    """
    x = as_tensor(x)
    *lead, S, k = x.shape
    pad = np.zeros((*lead, w - 1, k), dtype=x.data.dtype)
    xp = np.concatenate([pad, x.data], axis=-2)
    win = np.lib.stride_tricks.sliding_window_view(xp, w, axis=-2)  # [..., S, k, w]
    out = np.ascontiguousarray(np.swapaxes(win, -1, -2))

    def backward(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for j in range(w):
            gp[..., j:j + S, :] += g[..., :, j, :]
        return (gp[..., w - 1:, :],)

    return _wrap(out, (x,), backward)


def detach(x) -> Tensor:
    x = as_tensor(x)
    return Tensor(x.data, requires_grad=False)


def avgpool_axis(x, axis: int) -> Tensor:
    """Arithmetic mean along ``axis``; the axis is removed."""
    return mean(x, axis)


# ---------------------------------------------------------------------------
# differentiation drivers


def grad(loss_fn: Callable[[dict], Tensor], params: Mapping[str, np.ndarray]):
    """Evaluate ``loss_fn(params)`` and reverse-mode gradients.

    Returns ``(loss_value, grads)`` where ``grads`` mirrors ``params``.
    """
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    with Tape() as tape:
        loss = loss_fn(leaves)
    loss = as_tensor(loss)
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    adj = tape.backward(loss) if loss.requires_grad else {}
    grads = {}
    for k, leaf in leaves.items():
        g = adj.get(id(leaf))
        grads[k] = np.zeros_like(leaf.data) if g is None else g.astype(leaf.data.dtype)
    return float(loss.data.reshape(())), grads


@dataclass
class GradcheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    worst: tuple | None = None
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def gradcheck(loss_fn, params: Mapping[str, np.ndarray], step: float = 1e-5,
              tol: float = 1e-5, n_samples: int = 200, seed: int = 0,
              floor: float = 1e-8) -> GradcheckReport:
    """Compare reverse-mode gradients with central finite differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    At least ``n_samples`` coordinates (all of them if fewer exist) are drawn
    uniformly over the flattened parameter set.  Run in 64-bit.
    """
    with precision("float64"):
        base = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
        coords = [(k, i) for k, v in base.items() for i in range(v.size)]
        if not coords:
            return GradcheckReport(0.0, 0, tol)
        _, analytic = grad(loss_fn, base)
        rng = np.random.default_rng(seed)
        if len(coords) > n_samples:
            pick = rng.choice(len(coords), size=n_samples, replace=False)
            coords = [coords[i] for i in sorted(pick)]

        def f(p):
            return float(as_tensor(loss_fn({k: Tensor(v) for k, v in p.items()})).data)

        worst, worst_at, failures = 0.0, None, []
        for k, i in coords:
            flat = base[k].reshape(-1)
            orig = flat[i]
            flat[i] = orig + step
            fp = f(base)
            flat[i] = orig - step
            fm = f(base)
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            ana = float(analytic[k].reshape(-1)[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            if rel > worst:
                worst, worst_at = rel, (k, i, ana, num)
            if rel > tol:
                failures.append((k, i, ana, num, rel))
    return GradcheckReport(worst, len(coords), tol, worst_at, failures)
