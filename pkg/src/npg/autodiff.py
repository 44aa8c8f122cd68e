"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable quantity in the package is a :class:`Tensor`.  Operating
on tensors that require gradients records a node (parents + vector-Jacobian
product) on the result; :func:`backward` linearises the recorded graph into a
:class:`Tape` and sweeps it once in reverse.

Primitives with hand-written adjoints (the splatting rasterizer, bilinear
sampling) register themselves through :func:`record`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Set the float dtype used for new tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "vjp", "op", "__weakref__")
    # Make numpy defer to Tensor's reflected operators (ndarray @ Tensor etc.).
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.parents: tuple = ()
        self.vjp = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce(a, b):
    """Convert the non-tensor operand to the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def record(value: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Wrap ``value`` as the output of a primitive.

    ``vjp(g)`` must return one gradient (or ``None``) per parent.  The node is
    attached only when some parent requires gradients.
    """
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
        out.op = op
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, *shapes) -> tuple:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {', '.join(map(str, shapes))}") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("add", a.shape, b.shape)
    return record(a.data + b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("sub", a.shape, b.shape)
    return record(a.data - b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("mul", a.shape, b.shape)
    return record(a.data * b.data, (a, b),
                  lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
                  "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("div", a.shape, b.shape)
    out = a.data / b.data

    def vjp(g):
        gb = None
        if b.requires_grad:
            gb = unbroadcast(-g * out / b.data, b.shape)
        return unbroadcast(g / b.data, a.shape), gb

    return record(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("power: tensor exponents are not supported")
    p = float(exponent)
    out = a.data ** p
    return record(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "power")


def maximum_scalar(a, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient passes where a > floor."""
    a = as_tensor(a)
    keep = a.data > floor
    out = np.where(keep, a.data, floor).astype(a.dtype, copy=False)
    return record(out, (a,), lambda g: (g * keep,), "maximum")


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _coerce(a, b)
    cond = np.asarray(cond, dtype=bool)
    _broadcast_shape("where", cond.shape, a.shape, b.shape)
    out = np.where(cond, a.data, b.data)
    return record(out, (a, b),
                  lambda g: (unbroadcast(np.where(cond, g, 0.0), a.shape),
                             unbroadcast(np.where(cond, 0.0, g), b.shape)), "where")


# -- elementwise unary -------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a, eps: float = 0.0) -> Tensor:
    """Square root whose gradient is zero where the argument is <= eps."""
    a = as_tensor(a)
    out = np.sqrt(np.maximum(a.data, 0.0))
    safe = out > math.sqrt(eps) if eps > 0 else out > 0

    def vjp(g):
        return (np.where(safe, g * 0.5 / np.where(safe, out, 1.0), 0.0),)

    return record(out, (a,), vjp, "sqrt")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return record(out, (a,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def huber(a, eps: float) -> Tensor:
    """Elementwise Huber: x^2/(2 eps) for |x| <= eps, |x| - eps/2 beyond."""
    a = as_tensor(a)
    x = a.data
    small = np.abs(x) <= eps
    out = np.where(small, 0.5 * x * x / eps, np.abs(x) - 0.5 * eps)
    return record(out, (a,), lambda g: (g * np.where(small, x / eps, np.sign(x)),), "huber")


# -- reductions and shape ----------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return record(np.asarray(out), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return record(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    _broadcast_shape("broadcast_to", a.shape, shape)
    return record(np.broadcast_to(a.data, shape), (a,), lambda g: (unbroadcast(g, a.shape),),
                  "broadcast_to")


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return record(np.expand_dims(a.data, axis), (a,), lambda g: (g.reshape(a.shape),),
                  "expand_dims")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise TypeError("getitem: index with arrays, not tensors")
    out = a.data[index]

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return record(np.array(out, copy=True), (a,), vjp, "getitem")


def gather(a, index: np.ndarray, axis: int = 0) -> Tensor:
    """``a`` indexed by an integer array along ``axis`` (rows, by default)."""
    a = as_tensor(a)
    index = np.asarray(index)
    if index.dtype.kind not in "iu":
        raise ShapeError("gather: index must be integer")
    n = a.shape[axis]
    if index.size and (index.min() < -n or index.max() >= n):
        raise ShapeError(f"gather: index out of range for axis of length {n}")
    out = np.take(a.data, index, axis=axis)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        np.add.at(moved, index, gm)
        return (full,)

    return record(out, (a,), vjp, "gather")


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concatenate: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return record(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concatenate")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in ts]}") from None
    return record(out, ts,
                  lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))), "stack")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    out = a.data @ b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return record(out, (a, b), vjp, "matmul")


def cross(a, b) -> Tensor:
    """Cross product along the last axis (length 3)."""
    a, b = _coerce(a, b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeError(f"cross: last axis must be 3, got {a.shape} and {b.shape}")
    _broadcast_shape("cross", a.shape, b.shape)
    out = np.cross(a.data, b.data)
    return record(out, (a, b),
                  lambda g: (unbroadcast(np.cross(b.data, g), a.shape),
                             unbroadcast(np.cross(g, a.data), b.shape)), "cross")


def norm(a, axis: int = -1, keepdims: bool = False, eps: float = 1e-24) -> Tensor:
    """Euclidean norm with a zero gradient at (near-)zero vectors."""
    return sqrt(tsum(a * a, axis=axis, keepdims=keepdims), eps=eps)


def normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    x = a.data
    n = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    nn = np.maximum(n, eps)
    out = x / nn

    def vjp(g):
        proj = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - out * proj) / nn * (n > eps) + g / nn * (n <= eps),)

    return record(out, (a,), vjp, "normalize")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return record(out, (a,), vjp, "softmax")


# -- backward sweep ----------------------------------------------------------

class Tape:
    """Topologically ordered record of the operations reachable from a root."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_ = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in reversed(node.parents):
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))
        self.records = order

    def __len__(self) -> int:
        return len(self.records)

    @property
    def operations(self) -> list[str]:
        return [t.op for t in self.records if not t.is_leaf]

    @property
    def leaves(self) -> list[Tensor]:
        return [t for t in self.records if t.is_leaf]


def backward(root: Tensor, leaves: Iterable[Tensor] | None = None,
             accumulate: bool = True, retain: Iterable[Tensor] = ()) -> dict:
    """Propagate d(root)/d(.) to every requires-grad leaf.

    Returns a map leaf -> gradient array.  Leaves listed in ``leaves`` that
    the root does not depend on receive zeros.  With ``accumulate`` the
    gradients are also added into ``leaf.grad``.  Intermediate tensors in
    ``retain`` get their gradient reported in the map as well.
    """
    keep = {id(t) for t in retain}
    if not isinstance(root, Tensor):
        raise TypeError("backward: root must be a Tensor")
    if root.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    result: dict = {}
    if root.requires_grad:
        tape = Tape(root)
        grads[id(root)] = np.ones(root.shape, dtype=root.dtype)
        for node in reversed(tape.records):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in keep:
                result[node] = g
            if node.is_leaf:
                result[node] = g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype)
                if pg.shape != parent.shape:
                    pg = np.broadcast_to(pg, parent.shape)
                prev = grads.get(id(parent))
                grads[id(parent)] = pg.copy() if prev is None else prev + pg
    for leaf in leaves or ():
        if leaf not in result:
            result[leaf] = np.zeros(leaf.shape, dtype=leaf.dtype)
    if accumulate:
        for leaf, g in result.items():
            if not leaf.is_leaf:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return result


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- finite-difference oracle ------------------------------------------------

@dataclass
class FDReport:
    passed: bool
    max_rel_error: float
    n_checked: int
    skipped: list = field(default_factory=list)
    oracle_failure: bool = False
    message: str = ""

    def __bool__(self) -> bool:
        return self.passed


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-6,
                      tolerance: float = 1e-5, coords: Sequence[int] | None = None,
                      kink_tol: float = 1e-2, floor_frac: float = 1e-3) -> FDReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)`` where
    ``floor = floor_frac * max|n|``.  Coordinates where the one-sided slopes
    disagree by more than ``kink_tol`` (relative) are treated as kinks and
    skipped.  Non-finite function values make the oracle itself fail.
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64, copy=True)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    f0 = float(np.asarray(as_tensor(out).data).reshape(-1)[0])
    if not np.isfinite(f0):
        return FDReport(False, math.inf, 0, oracle_failure=True, message="f(x) not finite")
    analytic = backward(out, [leaf], accumulate=False)[leaf].reshape(-1)

    flat = x0.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    numeric: dict[int, float] = {}
    skipped = []
    for i in idx:
        vals = []
        for sgn in (1.0, -1.0):
            xp = flat.copy()
            xp[i] += sgn * step
            v = float(np.asarray(as_tensor(f(Tensor(xp.reshape(x0.shape)))).data).reshape(-1)[0])
            vals.append(v)
        if not all(np.isfinite(vals)):
            return FDReport(False, math.inf, 0, oracle_failure=True,
                            message=f"f not finite near coordinate {i}")
        fwd = (vals[0] - f0) / step
        bwd = (f0 - vals[1]) / step
        central = (vals[0] - vals[1]) / (2 * step)
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(central)):
            skipped.append(i)
            continue
        numeric[i] = central
    if not numeric:
        return FDReport(False, math.nan, 0, skipped, message="every coordinate skipped")
    keys = np.array(list(numeric))
    n = np.array([numeric[k] for k in keys])
    a = analytic[keys].astype(np.float64)
    floor = max(floor_frac * np.max(np.abs(n)), 1e-300)
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    worst = float(rel.max())
    return FDReport(worst < tolerance, worst, len(keys), skipped,
                    message=f"max rel err {worst:.3e} over {len(keys)} coords")
