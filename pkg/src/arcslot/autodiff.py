"""Dense float32 tensors with a dynamic reverse-mode tape.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
output keeps references to its parents and a closure mapping the output
gradient to per-parent gradients; ``Tensor.backward`` replays those closures in
reverse topological order. The tape is rebuilt on every forward pass, so
data-dependent control flow (the gated recursion) needs no special handling.

Arrays carry an optional leading batch dimension; "rows" always means the
second-to-last axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32
_default_dtype = [DTYPE]


class precision:
    """Context manager switching the dtype new tensors are created with.

    Only the gradient-check oracle uses this (float64 removes float32 rounding
    noise from central differences); models always run in float32.
    """

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type

    def __enter__(self):
        _default_dtype.append(self.dtype)
        return self

    def __exit__(self, *exc):
        _default_dtype.pop()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


def _as_array(x) -> np.ndarray:
    dtype = _default_dtype[-1]
    if isinstance(x, np.ndarray) and x.dtype == dtype:
        return x
    return np.asarray(x, dtype=dtype)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients to every reachable leaf that requires one.

        Leaf gradients accumulate into ``.grad``; callers zero them between
        steps. Intermediate gradients live only for the duration of the call.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): _as_array(grad)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


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


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward)


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    # Split by sign so exp never overflows.
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    x = _wrap(x)
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-np.clip(xd, -60.0, 60.0)))
    y = xd * s
    return _make(y, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def exp(x: Tensor) -> Tensor:
    x = _wrap(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    x = _wrap(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity that contributes no gradient to ``x``."""
    x = _wrap(x)
    return Tensor(x.data)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; a no-op when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / x.data.dtype.type(1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _wrap(x)
    shape = x.shape
    y = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(y, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    x, weight = _wrap(x), _wrap(weight)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(y, parents, backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _wrap(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _wrap(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- normalisation


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = _wrap(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the trailing axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: input {x.shape} vs scale {gamma.shape} / shift {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    width = xd.shape[-1]

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, width).sum(axis=0) if gamma.requires_grad else None
        gb = g.reshape(-1, width).sum(axis=0) if beta.requires_grad else None
        return gx, gg, gb

    return _make(y, (x, gamma, beta), backward)


# ---------------------------------------------------------------- indexing


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    x = _wrap(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[..., start:stop, :] = g
        return (out,)

    return _make(x.data[..., start:stop, :], (x,), backward)


def take_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    """Rows ``index`` of ``x`` (second-to-last axis)."""
    x = _wrap(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-2]):
        raise DimensionError(f"take_rows: index out of range for shape {x.shape}")
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (Ellipsis, idx, slice(None)), g)
        return (out,)

    return _make(x.data[..., idx, :], (x,), backward)


def scatter_rows(base: Tensor, index: Sequence[int], values: Tensor) -> Tensor:
    """Copy of ``base`` with rows ``index`` replaced by ``values``.

    Indices must be distinct. Untouched rows are bitwise copies of ``base``.
    """
    base, values = _wrap(base), _wrap(values)
    idx = np.asarray(index, dtype=np.int64)
    if values.shape[-2] != idx.size or values.shape[-1] != base.shape[-1]:
        raise DimensionError(f"scatter_rows: values {values.shape} do not fit {idx.size} rows of {base.shape}")
    y = base.data.copy()
    y[..., idx, :] = values.data

    def backward(g):
        gb = None
        if base.requires_grad:
            gb = g.copy()
            gb[..., idx, :] = 0.0
        gv = _unbroadcast(g[..., idx, :], values.shape) if values.requires_grad else None
        return gb, gv

    return _make(y, (base, values), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    widths = {p.shape[-1] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows: mismatched widths {[p.shape for p in parts]}")
    sizes = [p.shape[-2] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=-2), parts, backward)


def gather_embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _make(table.data[ids], (table,), backward)


def pick_last(x: Tensor, ids) -> Tensor:
    """``x[..., i, ids[..., i]]``: one entry per row, chosen along the last axis."""
    x = _wrap(x)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.shape[:-1]:
        raise DimensionError(f"pick_last: ids {ids.shape} do not match rows of {x.shape}")
    expanded = ids[..., None]
    y = np.take_along_axis(x.data, expanded, axis=-1)[..., 0]
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(out, expanded, g[..., None], axis=-1)
        return (out,)

    return _make(y, (x,), backward)


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a-n| / max(|a|, |n|), with tiny denominators clamped to ``floor``.

    The floor is taken relative to the largest gradient magnitude so coordinates
    whose true gradient is ~0 are judged against the gradient's overall scale.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor, 1e-3 * scale))
    return np.abs(a - n) / denom


def check_gradients(
    f: Callable,
    x: Tensor | Sequence[Tensor],
    h: float = 1e-3,
    tol: float = 1e-3,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
    oracle_dtype=np.float64,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(x)`` against central differences.

    ``x`` may be one tensor or a list of tensors; ``f`` is always called with
    ``x`` as given. With ``coords`` set, that many coordinates are sampled
    uniformly over all inputs instead of checking every one.

    The tape gradient is computed at the tensors' own precision (float32).
    The finite-difference side is evaluated at ``oracle_dtype``: at h=1e-3 a
    float32 evaluation of ``f`` carries rounding noise of order 1e-2 relative,
    which would swamp the comparison. Pass ``np.float32`` to see that noise.
    """
    params = [x] if isinstance(x, Tensor) else list(x)
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ContractError(f"check_gradients needs a scalar function, got shape {out.shape}")
    out.backward()
    tape = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    flat = [(pi, j) for pi, p in enumerate(params) for j in range(p.data.size)]
    if coords is not None and coords < len(flat):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(flat), size=coords, replace=False)
        flat = [flat[i] for i in sorted(pick)]

    saved = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(oracle_dtype)
    analytic = np.empty(len(flat))
    numeric = np.empty(len(flat))
    try:
        with precision(oracle_dtype):
            for k, (pi, j) in enumerate(flat):
                analytic[k] = tape[pi].reshape(-1)[j]
                view = params[pi].data.reshape(-1)
                orig = view[j]
                hi, lo = orig + view.dtype.type(h), orig - view.dtype.type(h)
                view[j] = hi
                up = float(f(x).data.reshape(-1)[0])
                view[j] = lo
                down = float(f(x).data.reshape(-1)[0])
                view[j] = orig
                # Divide by the step actually taken after rounding.
                numeric[k] = (up - down) / (float(hi) - float(lo))
    finally:
        for p, d in zip(params, saved):
            p.data = d
            p.grad = None
        for p, g in zip(params, tape):
            p.grad = g
    err = relative_error(analytic, numeric)
    return GradCheckReport(float(err.max(initial=0.0)), tol, analytic, numeric)
