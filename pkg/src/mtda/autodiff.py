"""Dense tensors with reverse-mode automatic differentiation.

Every op takes and returns :class:`Tensor` objects backed by row-major numpy
arrays. Shapes are aligned explicitly: binary elementwise ops accept equal
shapes or a scalar operand, and anything else goes through
:func:`broadcast_to` / :func:`reshape` / :func:`transpose`.

Gradients are computed by :func:`backward`, which replays the recorded nodes
reachable from a scalar loss in reverse recording order.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "ContractError",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "set_debug",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "affine",
    "transpose",
    "reshape",
    "broadcast_to",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "clamp",
    "square",
    "softmax_last",
    "layer_norm",
    "batch_norm",
    "conv2d",
    "sum",
    "mean",
    "concat",
    "index",
    "elementwise",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


_seq = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _debug() -> bool:
    return getattr(_state, "debug", False)


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf on this thread."""
    _state.debug = bool(flag)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if type(data) is np.ndarray and dtype is None and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype)
            if arr.dtype.kind != "f":
                arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    flags = _state.__dict__
    if flags.get("debug", False) and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite values produced by {backward_fn.__qualname__.split('.')[0]}")
    if flags.get("grad_enabled", True) and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# --------------------------------------------------------------------------
# tape


@dataclass
class Tape:
    """Recorded nodes reachable from a loss, in recording order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.is_leaf and t.requires_grad]


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Populate ``.grad`` on every grad-requiring leaf reachable from ``loss``.

    Leaf gradients accumulate across calls until they are reset.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# --------------------------------------------------------------------------
# elementwise


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")

    def _bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), _bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")

    def _bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(a.data - b.data, (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")

    def _bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), _bw)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    return _make(y, (x,), lambda g: (g * (y > 0),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _make(y, (x,), lambda g: (g * y * (1 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    y = np.clip(x.data, lo, hi)
    inside = y == x.data
    return _make(y, (x,), lambda g: (g * inside,))


def elementwise(x: Tensor, kind: str, other: Tensor | float | None = None) -> Tensor:
    """Dispatch by name: relu, sigmoid, add, mul, scale."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "add":
        return add(x, _lift(other, x))
    if kind == "mul":
        return mul(x, _lift(other, x))
    if kind == "scale":
        return scale(x, float(other))
    raise ValueError(f"unknown elementwise kind {kind!r}")


# --------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _make(y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(sorted(range(len(axes)), key=axes.__getitem__))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the backward pass sums the copies."""
    shape = tuple(shape)
    try:
        y = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: {x.shape} -> {shape}") from exc
    lead = len(shape) - x.ndim
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(x.shape) if n == 1 and shape[lead + i] != 1
    )

    def _bw(g):
        return (g.sum(axis=axes, keepdims=True).reshape(x.shape) if axes else g,)

    return _make(y, (x,), _bw)


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int)) for k in parts)


def index(x: Tensor, key) -> Tensor:
    y = x.data[key]
    basic = _is_basic(key)

    def _bw(g):
        out = np.zeros_like(x.data)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _make(np.array(y), (x,), _bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    ax = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
            n != m for i, (n, m) in enumerate(zip(t.shape, xs[0].shape)) if i != ax
        ):
            raise DimensionError(f"concat: {xs[0].shape} vs {t.shape} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in xs], axis=ax), xs, _bw)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(y), (x,), _bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size // max(np.asarray(y).size, 1)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / x.dtype.type(n), x.shape).copy(),)

    return _make(np.asarray(y, dtype=x.dtype), (x,), _bw)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., M, K] @ b[K, N]`` or batched ``a[..., M, K] @ b[..., K, N]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    shared = b.ndim == 2
    k = a.shape[-1]
    if shared:
        # fold leading dims into one GEMM
        a2 = a.data.reshape(-1, k)
        y = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        y = a.data @ b.data

    def _bw(g):
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(y, (a, b), _bw)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x[..., K] @ w[K, N] + b[N]``; the bias is shared across all leading positions."""
    if x.ndim < 1 or w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"affine: x {x.shape}, w {w.shape}, b {b.shape} are not aligned")
    x2 = x.data.reshape(-1, w.shape[0])
    y = (x2 @ w.data + b.data).reshape(x.shape[:-1] + (w.shape[1],))

    def _bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g2 @ w.data.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)

    return _make(y, (x, w, b), _bw)


def softmax_last(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_last: needs a non-empty last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), _bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def _bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make(y.astype(x.dtype), (x, gamma, beta), _bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mean_: np.ndarray | None = None,
    var_: np.ndarray | None = None,
    eps: float = 1e-5,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel normalisation of ``x[B, C, ...]``.

    With ``mean_``/``var_`` given the statistics are treated as constants
    (inference mode); otherwise batch statistics are used and differentiated
    through. Returns the output plus the statistics that were applied.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: gamma/beta must be ({c},), got {gamma.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    frozen = mean_ is not None
    if frozen:
        mu = np.asarray(mean_, dtype=x.dtype).reshape(bshape)
        var = np.asarray(var_, dtype=x.dtype).reshape(bshape)
    else:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = ((x.data - mu) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv
    g_ = gamma.data.reshape(bshape)
    y = xhat * g_ + beta.data.reshape(bshape)

    def _bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * g_
        if frozen:
            dx = gx * inv
        else:
            dx = inv * (
                gx - gx.mean(axis=axes, keepdims=True) - xhat * (gx * xhat).mean(axis=axes, keepdims=True)
            )
        return dx, dgamma, dbeta

    out = _make(y.astype(x.dtype), (x, gamma, beta), _bw)
    return out, mu.reshape(c), var.reshape(c)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[B, C, H, W] -> [B*H*W, k*k*C] patches of a zero-padded stride-1 sweep.

    Columns are ordered (ki, kj, c) so each offset copies contiguous channel runs.
    """
    bsz, c, h, wd = x.shape
    p = k // 2
    xcl = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((bsz, h, wd, k * k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i * k + j, :] = xcl[:, i : i + h, j : j + wd, :]
    return cols.reshape(bsz * h * wd, k * k * c)


def _conv_same(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    bsz, _, h, wd = x.shape
    cout, cin, k, _ = w.shape
    cols = _im2col(x, k)
    y = cols @ w.transpose(0, 2, 3, 1).reshape(cout, k * k * cin).T
    return np.ascontiguousarray(y.reshape(bsz, h, wd, cout).transpose(0, 3, 1, 2)), cols


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution: ``x[B, Cin, H, W]``, ``w[Cout, Cin, k, k]``, odd k."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} vs kernel {w.shape}")
    cout, cin, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    y, cols = _conv_same(x.data, w.data)
    if b is not None:
        y = y + b.data.reshape(1, cout, 1, 1)

    def _bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        # input gradient is a 'same' convolution with the flipped, transposed kernel
        w_t = np.ascontiguousarray(w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        gx, _ = _conv_same(g, w_t)
        grads = [gx, gw]
        if b is not None:
            grads.append(gm.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, _bw)


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def failing(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if not e.passed]

    def lines(self) -> list[str]:
        return [
            f"{'ok  ' if e.passed else 'FAIL'} {e.name:<48s} max_rel_err={e.max_rel_error:.3e} n={e.checked}"
            for e in self.entries
        ]


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_entries`` caps the number of (seeded, random) entries probed per
    tensor; ``None`` probes every entry.
    """
    params = list(params)
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    rng = np.random.default_rng(seed)
    entries = []
    for name, p in zip(names, params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        # perturb through a flat view, so the buffer must be a C-contiguous array
        p.data = np.array(p.data, order="C")
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        ok = True
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    ok = False
                    worst = float("inf")
                    continue
                num = (fp - fm) / (2 * h)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
        entries.append(GradCheckEntry(name, worst, len(idx), ok and worst < tol))
    return GradCheckReport(entries, tol)
