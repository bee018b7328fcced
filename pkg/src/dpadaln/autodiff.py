"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Var` wraps an ndarray and, when any of its inputs needs a gradient,
remembers a vector-Jacobian closure. Node ids grow with creation order, so
sorting by id gives a topological order of the recorded graph.

Per-example gradients fall out of broadcasting: parameters are fed as
``np.broadcast_to(p, (B, *p.shape))`` leaves, every primitive keeps the
leading axis, and the gradient of the summed loss with respect to such a leaf
holds one slice per example.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels

LN_EPS = 1e-5

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, name: str, index: int, value: float):
        super().__init__(f"non-finite perturbed loss {value!r} at parameter {name!r}, coordinate {index}")
        self.name = name
        self.index = index


class Var:
    __slots__ = ("value", "parents", "vjp", "requires_grad", "id", "op", "name")

    def __init__(self, value, parents=(), vjp=None, op="leaf", name=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.op = op
        self.name = name

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

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
        if isinstance(other, Var):
            raise TypeError("division by a Var is not a primitive")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 else axes)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def constant(value) -> Var:
    return Var(value, op="const")


def leaf(value, name=None) -> Var:
    return Var(value, op="param", name=name, requires_grad=True)


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else constant(x)


def _node(value, parents, vjp, op):
    if any(p.requires_grad for p in parents):
        return Var(value, parents, vjp, op, requires_grad=True)
    return Var(value, op=op)


def _compute(op, parents, fn):
    try:
        return fn()
    except ValueError as exc:
        shapes = ", ".join(str(p.shape) for p in parents)
        raise ShapeError(f"{op} node (inputs {shapes}): {exc}") from None


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out = _compute("add", (a, b), lambda: a.value + b.value)
    return _node(out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out = _compute("sub", (a, b), lambda: a.value - b.value)
    return _node(out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out = _compute("mul", (a, b), lambda: a.value * b.value)

    def vjp(g):
        ga = unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), vjp, "mul")


def _mm(x, w):
    # stacked @ 2-D goes through one GEMM instead of one per leading index
    if w.ndim == 2 and x.ndim > 2:
        return (x.reshape(-1, x.shape[-1]) @ w).reshape(*x.shape[:-1], w.shape[-1])
    return np.matmul(x, w)


def matmul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul node needs >= 2-D operands, got {a.shape} and {b.shape}")
    out = _compute("matmul", (a, b), lambda: _mm(a.value, b.value))

    def vjp(g):
        ga = unbroadcast(_mm(g, np.swapaxes(b.value, -1, -2)), a.shape) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif b.ndim == 2 and a.ndim > 2:
            gb = a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), vjp, "matmul")


def tanh(a) -> Var:
    a = _as_var(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def reduce_sum(a, axis=None, keepdims=False) -> Var:
    a = _as_var(a)
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), vjp, "sum")


def reshape(a, shape) -> Var:
    a = _as_var(a)
    out = _compute("reshape", (a,), lambda: a.value.reshape(shape))
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Var:
    a = _as_var(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.value, axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> Var:
    a = _as_var(a)
    out = a.value[idx]

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g) if _is_fancy(idx) else full.__setitem__(idx, g)
        return (full,)

    return _node(out, (a,), vjp, "getitem")


def _is_fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(parts, axis=-1) -> Var:
    parts = [_as_var(p) for p in parts]
    out = _compute("concat", tuple(parts), lambda: np.concatenate([p.value for p in parts], axis=axis))
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _node(out, tuple(parts), lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def softmax(a, axis=-1) -> Var:
    a = _as_var(a)
    out = a.value - a.value.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)
    return _node(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def layer_norm(a, eps=LN_EPS) -> Var:
    """Affine-free LayerNorm over the last axis."""
    a = _as_var(a)
    flat = np.ascontiguousarray(a.value.reshape(-1, a.shape[-1]))
    y, rstd = kernels.layer_norm_forward(flat, eps)
    out = y.reshape(a.shape)

    def vjp(g):
        gx = kernels.layer_norm_backward(np.ascontiguousarray(g.reshape(-1, a.shape[-1])), y, rstd)
        return (gx.reshape(a.shape),)

    return _node(out, (a,), vjp, "layer_norm")


def bound(a, limit: float, kind: int, band: float = 0.0) -> Var:
    """Coordinate-wise bounding into ``[-limit, limit]`` (see ``kernels``)."""
    a = _as_var(a)
    out = kernels.bound_forward(a.value, limit, kind, band)
    return _node(out, (a,), lambda g: (g * kernels.bound_derivative(a.value, limit, kind, band),), "bound")


def clamp(a, limit: float) -> Var:
    return bound(a, limit, kernels.KIND_HARD)


def clamp_ste(a, limit: float) -> Var:
    """Hard clamp forward, identity backward."""
    return bound(a, limit, kernels.KIND_STE)


def project_ball(a, radius: float) -> Var:
    """Project each vector along the last axis onto the l2 ball of ``radius``."""
    a = _as_var(a)
    if np.isinf(radius):
        return a
    norms = np.sqrt((a.value * a.value).sum(axis=-1, keepdims=True))
    outside = norms > radius
    scale = np.where(outside, radius / np.where(outside, norms, 1.0), 1.0)
    out = np.where(outside, a.value * scale, a.value)

    def vjp(g):
        unit = a.value / np.where(norms > 0, norms, 1.0)
        proj = g - unit * (unit * g).sum(axis=-1, keepdims=True)
        return (np.where(outside, scale * proj, g),)

    return _node(out, (a,), vjp, "project_ball")


# ------------------------------------------------------------------- graphs


class GradientVector:
    """Per-parameter gradient arrays in a fixed parameter order.

    ``batch`` is ``None`` for a single gradient, or ``B`` when every array
    carries a leading per-example axis.
    """

    def __init__(self, arrays: dict[str, np.ndarray], batch: int | None = None):
        self.arrays = dict(arrays)
        self.batch = batch

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def names(self):
        return list(self.arrays)

    @property
    def dim(self) -> int:
        lead = 0 if self.batch is None else 1
        return int(sum(np.prod(a.shape[lead:]) for a in self.arrays.values()))

    def flatten(self) -> np.ndarray:
        if self.batch is None:
            return np.concatenate([a.reshape(-1) for a in self.arrays.values()])
        return np.concatenate([a.reshape(self.batch, -1) for a in self.arrays.values()], axis=1)

    @classmethod
    def unflatten(cls, flat: np.ndarray, template: dict[str, tuple]) -> "GradientVector":
        """Rebuild from a flat vector (or ``(B, P)`` matrix) given name -> shape."""
        flat = np.asarray(flat, dtype=np.float64)
        batch = None if flat.ndim == 1 else flat.shape[0]
        out, pos = {}, 0
        for name, shape in template.items():
            n = int(np.prod(shape))
            chunk = flat[..., pos:pos + n]
            out[name] = chunk.reshape(tuple(shape) if batch is None else (batch, *shape)).copy()
            pos += n
        if pos != flat.shape[-1]:
            raise ShapeError(f"flat length {flat.shape[-1]} does not match template size {pos}")
        return cls(out, batch)

    def example(self, i: int) -> "GradientVector":
        return GradientVector({k: v[i] for k, v in self.arrays.items()})

    def norm(self):
        flat = self.flatten()
        return float(np.sqrt(flat @ flat)) if self.batch is None else np.sqrt(np.einsum("bp,bp->b", flat, flat))


@dataclass
class Graph:
    """A differentiable program: ``fn(params, inputs) -> outputs``.

    ``fn`` receives dicts of :class:`Var` and returns a dict of :class:`Var`.
    ``params`` fixes the parameter identifiers and their order.
    """

    fn: Callable[[dict, dict], dict]
    params: dict[str, np.ndarray]
    input_shapes: dict[str, tuple] | None = None

    def __post_init__(self):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in self.params.items()}

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.params.items()}

    @property
    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


@dataclass
class Trace:
    outputs: dict[str, Var]
    leaves: dict[str, Var]
    batch: int | None = None
    inputs: dict[str, np.ndarray] = field(default_factory=dict)


def _check_inputs(graph: Graph, inputs: dict):
    if graph.input_shapes is None:
        return
    for name, shape in graph.input_shapes.items():
        if name not in inputs:
            raise ShapeError(f"missing input {name!r}")
        got = np.shape(inputs[name])
        if len(got) != len(shape) or any(s is not None and s != g for s, g in zip(shape, got)):
            raise ShapeError(f"input {name!r}: expected shape {shape}, got {got}")


def forward(graph: Graph, inputs: dict, params: dict | None = None, track: bool = True,
            batch: int | None = None) -> Trace:
    """Evaluate ``graph``. With ``batch`` set, parameters become per-example leaves."""
    _check_inputs(graph, inputs)
    params = graph.params if params is None else params
    if batch is not None:
        values = {k: np.broadcast_to(v, (batch, *v.shape)) for k, v in params.items()}
    else:
        values = params
    leaves = {k: (leaf(v, k) if track else constant(v)) for k, v in values.items()}
    ins = {k: constant(v) for k, v in inputs.items()}
    outputs = graph.fn(leaves, ins)
    return Trace(outputs, leaves, batch, dict(inputs))


def grad(loss: Var, wrt: list[Var]) -> list[np.ndarray]:
    """Gradients of a size-1 ``loss`` with respect to leaf nodes ``wrt``."""
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    wanted = {v.id for v in wrt}
    nodes, stack, seen = [], [loss], set()
    while stack:
        n = stack.pop()
        if n.id in seen or not n.requires_grad:
            continue
        seen.add(n.id)
        nodes.append(n)
        stack.extend(n.parents)
    nodes.sort(key=lambda n: n.id, reverse=True)
    grads = {loss.id: np.ones_like(loss.value)}
    kept = {}
    for n in nodes:
        g = grads.pop(n.id, None)
        if g is None:
            continue
        if n.id in wanted:
            kept[n.id] = g
        if n.vjp is None:
            continue
        for p, pg in zip(n.parents, n.vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    return [kept.get(v.id, np.zeros(v.shape)) for v in wrt]


def backward(trace: Trace, loss: str = "loss") -> GradientVector:
    """Gradient of output ``loss`` with respect to every parameter of the trace."""
    out = trace.outputs[loss]
    if trace.batch is not None:
        out = out.sum()
    names = list(trace.leaves)
    gs = grad(out, [trace.leaves[k] for k in names])
    return GradientVector(dict(zip(names, gs)), trace.batch)


def per_example_gradients(graph: Graph, inputs: dict, batch: int, loss: str = "loss"):
    """Per-example losses ``(B,)`` and gradients with a leading ``B`` axis."""
    trace = forward(graph, inputs, batch=batch)
    losses = trace.outputs[loss]
    if losses.shape != (batch,):
        raise ShapeError(f"per-example loss must have shape ({batch},), got {losses.shape}")
    return losses.value.copy(), backward(trace, loss), trace


def finite_diff(graph: Graph, inputs: dict, loss: str = "loss", epsilon: float = 1e-5,
                batched: bool = False, chunk: int = 512) -> GradientVector:
    """Central differences ``(f(p + eps e) - f(p - eps e)) / (2 eps)`` per coordinate.

    With ``batched`` the inputs must carry a leading axis of size 1 and the loss
    output must have one entry per row; perturbations are then evaluated
    ``chunk`` at a time along that axis. The forward path is the same either way.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    out = {}
    for name, base in graph.params.items():
        g = np.empty(base.size)
        if batched:
            _fd_batched(graph, inputs, loss, epsilon, name, g, chunk)
        else:
            for j in range(base.size):
                vals = []
                for sign in (1.0, -1.0):
                    p = dict(graph.params)
                    q = base.copy().reshape(-1)
                    q[j] += sign * epsilon
                    p[name] = q.reshape(base.shape)
                    v = forward(graph, inputs, p, track=False).outputs[loss].value
                    if v.size != 1:
                        raise ShapeError(f"loss must be scalar, got shape {v.shape}")
                    v = float(v.reshape(-1)[0])
                    if not np.isfinite(v):
                        raise NonFiniteLossError(name, j, v)
                    vals.append(v)
                g[j] = (vals[0] - vals[1]) / (2.0 * epsilon)
        out[name] = g.reshape(base.shape)
    return GradientVector(out)


def _fd_batched(graph, inputs, loss, epsilon, name, g, chunk):
    base = graph.params[name]
    size = base.size
    for start in range(0, size, chunk):
        idx = np.arange(start, min(size, start + chunk))
        n = 2 * len(idx)
        pert = np.broadcast_to(base.reshape(-1), (n, size)).copy()
        rows = np.arange(len(idx))
        pert[2 * rows, idx] += epsilon
        pert[2 * rows + 1, idx] -= epsilon
        # only the perturbed parameter carries the batch axis, so nodes upstream
        # of it stay at batch 1 and are evaluated once per chunk
        p = dict(graph.params)
        p[name] = pert.reshape(n, *base.shape)
        vals = forward(graph, inputs, p, track=False).outputs[loss].value.reshape(-1)
        if vals.shape == (1,):
            vals = np.repeat(vals, n)
        if vals.shape != (n,):
            raise ShapeError(f"batched finite differences need one loss per row, got {vals.shape}")
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise NonFiniteLossError(name, int(idx[bad[0] // 2]), float(vals[bad[0]]))
        g[idx] = (vals[0::2] - vals[1::2]) / (2.0 * epsilon)
