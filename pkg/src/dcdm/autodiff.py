"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` is created per forward pass. Leaves are registered with
:meth:`Tape.variable`; every primitive applied to a taped tensor appends one
record holding its local gradient rule. Tensors built without a tape are
plain constants and cost nothing beyond the numpy work.

Only the broadcasting the model needs is supported: elementwise ops follow
numpy rules, matmul broadcasts over leading batch axes.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class NondeterminismError(RuntimeError):
    """Two identical evaluations of a function disagreed."""


class Tensor:
    __slots__ = ("data", "node", "tape")
    __array_priority__ = 1000

    def __init__(self, data, node: int | None = None, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(lift(other)))

    def __rsub__(self, other):
        return add(lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(lift(other), self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Tape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self):
        self._ops: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self._count = 0
        self.names: dict[int, str] = {}

    def __len__(self) -> int:
        return len(self._ops)

    def _new_node(self) -> int:
        self._count += 1
        return self._count

    def variable(self, data, name: str | None = None) -> Tensor:
        """Register a leaf. The array is used as-is, not copied."""
        node = self._new_node()
        if name is not None:
            self.names[node] = name
        return Tensor(data, node, self)

    def record(self, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
        node = self._new_node()
        self._ops.append((node, tuple(p.node for p in parents), backward))
        return Tensor(data, node, self)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` for every node that reaches it.

        Records are replayed in reverse insertion order, which is a reverse
        topological order because inputs always exist before outputs.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node is None:
            raise ValueError("loss is not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        for node, parents, fn in reversed(self._ops):
            g = grads.get(node)
            if g is None:
                continue
            if node != loss.node:
                # interior node: its gradient is fully accumulated now
                del grads[node]
            for pnode, pg in zip(parents, fn(g)):
                if pnode is None or pg is None:
                    continue
                prev = grads.get(pnode)
                grads[pnode] = pg if prev is None else prev + pg
        return grads

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        grads = self.backward(loss)
        return [grads.get(t.node, np.zeros_like(t.data)) for t in wrt]


def lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    # a finite sum implies finite entries; only fall back to the full scan on overflow
    if not np.isfinite(np.add.reduce(data, axis=None)) and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise ValueError(f"{op}: inputs live on different tapes")
            tape = p.tape
    if tape is None:
        return Tensor(data)
    return tape.record(data, parents, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    return _finish(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _finish(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    a, b = lift(a), lift(b)
    ad, bd = a.data, b.data
    need_a, need_b = a.node is not None, b.node is not None

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if need_a else None,
                _unbroadcast(g * ad, bd.shape) if need_b else None)

    return _finish(ad * bd, (a, b), back, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a constant scalar."""
    return _finish(a.data * s, (a,), lambda g: (g * s,), "scale")


def div(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _finish(out, (a, b), back, "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _finish(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _finish(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _finish(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _finish(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def silu(a: Tensor) -> Tensor:
    ad = a.data
    sig = 1.0 / (1.0 + np.exp(-ad))
    out = ad * sig
    return _finish(out, (a,), lambda g: (g * sig * (1.0 + ad * (1.0 - sig)),), "silu")


# ------------------------------------------------------------------- shaping

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _finish(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _finish(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _finish(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic(idx)

    def back(g):
        z = np.zeros(shape)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _finish(a.data[idx], (a,), back, "getitem")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [lift(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _finish(np.concatenate([p.data for p in parts], axis=axis), parts, back, "concat")


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup ``table[ids]`` with integer ``ids`` of any shape."""
    shape = table.shape

    def back(g):
        z = np.zeros(shape)
        np.add.at(z, ids, g)
        return (z,)

    return _finish(table.data[ids], (table,), back, "take_rows")


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# -------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.node is not None, b.node is not None
    if bd.ndim == 2 and ad.ndim > 2:
        # stacked rows times one matrix: a single GEMM, and a single GEMM back
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def back2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return ((g2 @ bd.T).reshape(ad.shape) if need_a else None,
                    a2.T @ g2 if need_b else None)

        return _finish(out, (a, b), back2, "matmul")

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if need_a else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if need_b else None
        return ga, gb

    return _finish(np.matmul(ad, bd), (a, b), back, "matmul")


# ------------------------------------------------------------------- softmax

def softmax_rows(m: Tensor, allow: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax over the last axis.

    ``allow`` marks permitted entries; forbidden ones behave as an additive
    -inf bias. Accepted layouts: ``m`` (R, C) with allow (R, C); (N, R, C)
    with (N, R, C); (N, H, R, C) with allow (N, R, C) shared across H.
    A row with nothing permitted returns zeros.
    """
    shape = m.shape
    if m.ndim == 2:
        x4 = m.data.reshape(1, 1, *shape)
        a3 = None if allow is None else allow.reshape(1, *shape)
    elif m.ndim == 3:
        x4 = m.data.reshape(shape[0], 1, shape[1], shape[2])
        a3 = allow
    elif m.ndim == 4:
        x4 = m.data
        a3 = allow
    else:
        raise ValueError(f"softmax_rows expects 2-4 dims, got {shape}")
    x4 = np.ascontiguousarray(x4)
    if a3 is not None:
        a3 = np.ascontiguousarray(np.broadcast_to(a3, (x4.shape[0],) + x4.shape[2:]))
    probs = kernels.masked_softmax(x4, a3)

    def back(g):
        g4 = np.ascontiguousarray(g.reshape(probs.shape))
        return (kernels.masked_softmax_grad(probs, g4).reshape(shape),)

    return _finish(probs.reshape(shape), (m,), back, "softmax_rows")


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _finish(out, (a,), lambda g: (g - probs * g.sum(axis=-1, keepdims=True),),
                   "log_softmax")


# --------------------------------------------------------------------- fused

def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    xd, gd = x.data, gain.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    normed = xd * inv

    def back(g):
        gg = g * gd
        gx = inv * (gg - normed * (gg * normed).mean(axis=-1, keepdims=True))
        ggain = (g * normed).reshape(-1, gd.shape[-1]).sum(axis=0).reshape(gd.shape)
        return gx, ggain

    return _finish(normed * gd, (x, gain), back, "rms_norm")


def vector_norm(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis."""
    xd = x.data
    out = np.sqrt((xd * xd).sum(axis=-1))

    def back(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out[..., None] > 0, xd / safe[..., None], 0.0) * g[..., None],)

    return _finish(out, (x,), back, "vector_norm")


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; gradient passes to ``soft`` unchanged."""
    if hard.shape != soft.shape:
        raise ValueError(f"straight_through shape mismatch {hard.shape} vs {soft.shape}")
    return _finish(np.asarray(hard, dtype=np.float64), (soft,), lambda g: (g,),
                   "straight_through")


# ------------------------------------------------------------- gradient check

def finite_difference_check(f: Callable[..., Tensor], params: Sequence[np.ndarray],
                            step: float = 1e-5) -> float:
    """Max relative error between taped gradients and central differences.

    ``f`` maps one tensor per entry of ``params`` to a scalar tensor and must
    be deterministic. The arrays in ``params`` are perturbed in place and
    restored. Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as
    the denominator.
    """
    tape = Tape()
    leaves = [tape.variable(p) for p in params]
    loss = f(*leaves)
    analytic = tape.gradients(loss, leaves)

    def value() -> float:
        return f(*[Tensor(p) for p in params]).item()

    first, second = value(), value()
    if first != second or first != loss.item():
        raise NondeterminismError(
            f"repeated evaluations differ: {loss.item()!r}, {first!r}, {second!r}")

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise ValueError("finite_difference_check needs contiguous parameter arrays")
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
