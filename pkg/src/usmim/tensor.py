"""Minimal reverse-mode autodiff on top of numpy.

Every differentiable op appends a node to the active :class:`Tape` when any of
its inputs requires a gradient. :func:`backward` walks the tape once in
reverse, deposits gradients on leaf tensors and clears the tape.

Broadcasting is deliberately restricted to scalar-vs-tensor and equal shapes;
use :func:`expand` to broadcast explicitly.
"""

from __future__ import annotations

import builtins
import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in DTYPES:
            arr = arr.astype(np.float64)
        if arr.dtype not in DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)


def parameter(data, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype, copy=True), requires_grad=True, name=name)


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str
    kink: bool = False


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    enabled: bool = True

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _stack() -> list[Tape]:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = [Tape()]
    return st


def active_tape() -> Tape:
    return _stack()[-1]


@contextlib.contextmanager
def tape():
    """Record onto a fresh tape for the duration of the block."""
    t = Tape()
    _stack().append(t)
    try:
        yield t
    finally:
        _stack().pop()


@contextlib.contextmanager
def no_grad():
    t = Tape(enabled=False)
    _stack().append(t)
    try:
        yield t
    finally:
        _stack().pop()


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _result(data: np.ndarray, inputs: Sequence[Tensor], bwd, op: str, kink: bool = False) -> Tensor:
    t = active_tape()
    track = t.enabled and any(i.requires_grad for i in inputs)
    out = Tensor(data)
    if track:
        out.requires_grad = True
        t.nodes.append(Node(out, tuple(inputs), bwd, op, kink))
    return out


def _check_dtypes(*ts: Tensor) -> None:
    d = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d:
            raise TypeError(f"dtype mismatch: {d} vs {t.dtype}")


def _binary_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}; use expand()")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _binary_shapes(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _binary_shapes(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _binary_shapes(a, b)
    ad, bd = a.data, b.data

    ra, rb = a.requires_grad, b.requires_grad

    def bwd(g):
        return (
            _unbroadcast(g * bd, ad.shape) if ra else None,
            _unbroadcast(g * ad, bd.shape) if rb else None,
        )

    return _result(ad * bd, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _binary_shapes(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero")
    out = ad / bd

    ra, rb = a.requires_grad, b.requires_grad

    def bwd(g):
        return (
            _unbroadcast(g / bd, ad.shape) if ra else None,
            _unbroadcast(-g * out / bd, bd.shape) if rb else None,
        )

    return _result(out, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise DomainError("log of non-positive value")
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(ad)
    return _result(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _result(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), "silu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.logaddexp(0.0, x).astype(x.dtype), (a,), lambda g: (g * _sigmoid(x),), "softplus")


_UNARY = {"exp": exp, "log": log, "neg": neg, "sqrt": sqrt, "silu": silu, "softplus": softplus}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](_as_tensor(a))
    raise ValueError(f"unknown elementwise op {op!r}")


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = _as_tensor(b, like=a)
    else:
        b = _as_tensor(b)
        a = _as_tensor(a, like=b)
    _check_dtypes(a, b)
    return a, b


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dims, if any, must match exactly."""
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul needs equal-rank >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    ra, rb = a.requires_grad, b.requires_grad

    def bwd(g):
        return (
            g @ np.swapaxes(bd, -1, -2) if ra else None,
            np.swapaxes(ad, -1, -2) @ g if rb else None,
        )

    return _result(ad @ bd, (a, b), bwd, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is ``[in, out]``."""
    _check_dtypes(x, weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(*lead, wd.shape[0]) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out.reshape(*lead, wd.shape[1]), inputs, bwd, "linear")


# ---------------------------------------------------------------- normalisation


def softmax_t(x: Tensor, tau: float = 1.0) -> Tensor:
    """Softmax of ``x / tau`` over the last axis."""
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    z = x.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)) / tau,)

    return _result(p, (x,), bwd, "softmax_t")


def log_softmax_t(x: Tensor, tau: float = 1.0) -> Tensor:
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    z = x.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bwd(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / tau,)

    return _result(out, (x,), bwd, "log_softmax_t")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm affine {gamma.shape}/{beta.shape} vs feature dim {d}")
    _check_dtypes(x, gamma, beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bwd(g):
        axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gh = g * gd
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), bwd, "layernorm")


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    if len(axes) == 0:
        raise ShapeError("empty axis selection")
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-D tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axis}")
    return tuple(sorted(out))


def reduce(op: str, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    xd = x.data
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    if op == "sum":
        out = xd.sum(axis=axes, keepdims=keepdims)
        return _result(out, (x,), lambda g: (np.broadcast_to(g.reshape(kept_shape), xd.shape).copy(),), "sum")
    if op == "mean":
        n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        out = xd.mean(axis=axes, keepdims=keepdims)
        return _result(out, (x,), lambda g: (np.broadcast_to(g.reshape(kept_shape) / n, xd.shape).copy(),), "mean")
    if op == "max":
        if x.size == 0:
            raise ShapeError("max of empty tensor")
        rest = [i for i in range(x.ndim) if i not in axes]
        perm = rest + list(axes)
        moved = np.transpose(xd, perm)
        flat = moved.reshape(*moved.shape[: len(rest)], -1)
        idx = flat.argmax(axis=-1)  # first occurrence, i.e. lowest index wins ties
        mx = np.take_along_axis(flat, idx[..., None], axis=-1)
        kink = bool(((flat == mx).sum(axis=-1) > 1).any())
        out = mx[..., 0].reshape(kept_shape) if keepdims else mx[..., 0]

        def bwd(g):
            gf = np.zeros_like(flat)
            np.put_along_axis(gf, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
            gm = gf.reshape(moved.shape)
            return (np.transpose(gm, np.argsort(perm)),)

        return _result(out, (x,), bwd, "max", kink=kink)
    raise ValueError(f"unknown reduction {op!r}")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("sum", x, axis, keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", x, axis, keepdims)


def max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("max", x, axis, keepdims)


# ---------------------------------------------------------------- layout


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def expand(x: Tensor, shape) -> Tensor:
    """Explicit broadcast; ``x`` must have the same rank with 1s where it grows."""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeError(f"cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s != t)
    out = np.broadcast_to(x.data, shape)
    return _result(out, (x,), lambda g: (g.sum(axis=axes, keepdims=True),), "expand")


def gather(x: Tensor, index, axis: int = 0) -> Tensor:
    """Select entries along ``axis`` (``np.take`` semantics); repeats allowed."""
    idx = np.asarray(index, dtype=np.int64)
    ax = _norm_axes(axis, x.ndim)[0]
    if idx.size and (idx.min() < -x.shape[ax] or idx.max() >= x.shape[ax]):
        raise IndexError(f"gather index out of range for axis of size {x.shape[ax]}")
    src = x.shape

    def bwd(g):
        gx = np.zeros(src, dtype=g.dtype)
        np.add.at(gx, (slice(None),) * ax + (idx,), g)
        return (gx,)

    return _result(np.take(x.data, idx, axis=ax), (x,), bwd, "gather")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ShapeError("concat of empty list")
    _check_dtypes(*xs)
    ax = _norm_axes(axis, xs[0].ndim)[0]
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, xs[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat shape mismatch {t.shape} vs {xs[0].shape}")
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), bwd, "concat")


def cumsum(x: Tensor, axis: int) -> Tensor:
    ax = _norm_axes(axis, x.ndim)[0]

    def bwd(g):
        return (np.flip(np.cumsum(np.flip(g, ax), axis=ax), ax),)

    return _result(np.cumsum(x.data, axis=ax), (x,), bwd, "cumsum")


def cumprod(x: Tensor, axis: int) -> Tensor:
    ax = _norm_axes(axis, x.ndim)[0]
    xd = x.data
    out = np.cumprod(xd, axis=ax)

    def bwd(g):
        if np.any(xd == 0):
            raise DomainError("cumprod gradient undefined at zero entries")
        rev = np.flip(np.cumsum(np.flip(g * out, ax), axis=ax), ax)
        return (rev / xd,)

    return _result(out, (x,), bwd, "cumprod")


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    t = active_tape()
    if not loss.requires_grad:
        t.clear()
        return
    produced = {id(n.out) for n in t.nodes}
    if id(loss) not in produced:
        raise ValueError("loss was not produced on the active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    inner = produced
    leaves: dict[int, Tensor] = {}
    for node in reversed(t.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        gins = node.backward(g)
        for inp, gi in zip(node.inputs, gins):
            if gi is None or not inp.requires_grad:
                continue
            k = id(inp)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = np.asarray(gi, dtype=inp.dtype)
            if k not in inner:
                leaves[k] = inp
    for k, leaf in leaves.items():
        g = grads[k]
        if not np.all(np.isfinite(g)):
            t.clear()
            raise NonFiniteError(f"non-finite gradient for {leaf.name or 'leaf'}")
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    t.clear()


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    nondifferentiable: bool
    worst: tuple[int, int] | None = None  # (tensor index, flat coordinate)
    tol: float | None = None

    def passed(self, tol: float | None = None) -> bool:
        tol = self.tol if tol is None else tol
        if tol is None:
            raise ValueError("no tolerance given")
        return self.max_rel_error < tol


def grad_check(
    f: Callable[[], Tensor] | Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-4,
    tol: float | None = None,
    floor: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f`` with central differences.

    ``f`` is called with no arguments and must read the (mutated in place)
    data of ``x``. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.grad = None
    with tape() as tp:
        out = f()
        kink = any(n.kink for n in tp.nodes)
        backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in xs]
    worst_rel, worst_abs, worst, count = 0.0, 0.0, None, 0
    with no_grad():
        for ti, t in enumerate(xs):
            flat = t.data.reshape(-1)
            coords: Iterable[int] = range(flat.size)
            if max_coords is not None and flat.size > max_coords:
                rng = rng or np.random.default_rng(0)
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                fp = f().item()
                flat[c] = orig - h
                fm = f().item()
                flat[c] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError("non-finite value during finite differences")
                num = (fp - fm) / (2 * h)
                a = float(analytic[ti].reshape(-1)[c])
                err = abs(a - num)
                rel = err / builtins.max(abs(a), abs(num), floor)
                count += 1
                if rel > worst_rel:
                    worst_rel, worst = rel, (ti, int(c))
                worst_abs = builtins.max(worst_abs, err)
    for t in xs:
        t.grad = None
    return GradCheckReport(worst_rel, worst_abs, count, kink, worst, tol)

