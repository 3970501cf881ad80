"""Reverse-mode automatic differentiation over dense float64 arrays.

Leaves are named placeholders; interior nodes apply primitive operations.
A Graph freezes the DAG reachable from one output node, checks shapes at
construction time, and evaluates or differentiates under a leaf binding.
Evaluation is pure: identical bindings give bit-identical results.
"""
from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np
from scipy.special import erf

from .errors import GraphError

NORM_EPS = 1e-12       # zero-norm guard used by the cosine primitives
_BN_EPS = 1e-5         # variance floor inside the normalization primitive
_SQRT2 = float(np.sqrt(2.0))
_PHI_SCALE = float(1.0 / np.sqrt(2.0 * np.pi))


def tensor(data) -> np.ndarray:
    """Coerce to a float64 ndarray, rejecting non-finite entries."""
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise GraphError("tensor requires finite values (NaN/Inf rejected)")
    return arr


def _broadcast(sa, sb):
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError as exc:
        raise GraphError(f"shapes {sa} and {sb} do not broadcast") from exc


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast up from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def row_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity per leading-axis row, flattening trailing axes.

    Rows where either side has L2 norm below NORM_EPS get cosine 0.
    """
    fa = a.reshape(a.shape[0], -1)
    fb = b.reshape(b.shape[0], -1)
    na = np.sqrt((fa * fa).sum(axis=1))
    nb = np.sqrt((fb * fb).sum(axis=1))
    dots = (fa * fb).sum(axis=1)
    guarded = (na < NORM_EPS) | (nb < NORM_EPS)
    denom = np.where(guarded, 1.0, na * nb)
    return np.where(guarded, 0.0, dots / denom)


# ---------------------------------------------------------------------------
# primitive operations
#
# Each op exposes forward(*values) and vjp(g, y, xs, needs) where `needs` is
# a tuple of bools marking which parent gradients the caller will use; an op
# may return None in unneeded slots to skip work.
# ---------------------------------------------------------------------------


class _Add:
    def forward(self, a, b):
        return a + b

    def vjp(self, g, y, xs, needs):
        a, b = xs
        da = _unbroadcast(g, a.shape) if needs[0] else None
        db = _unbroadcast(g, b.shape) if needs[1] else None
        return da, db


class _Sub:
    def forward(self, a, b):
        return a - b

    def vjp(self, g, y, xs, needs):
        a, b = xs
        da = _unbroadcast(g, a.shape) if needs[0] else None
        db = _unbroadcast(-g, b.shape) if needs[1] else None
        return da, db


class _Mul:
    def forward(self, a, b):
        return a * b

    def vjp(self, g, y, xs, needs):
        a, b = xs
        da = _unbroadcast(g * b, a.shape) if needs[0] else None
        db = _unbroadcast(g * a, b.shape) if needs[1] else None
        return da, db


class _Scale:
    def __init__(self, c: float):
        self.c = float(c)

    def forward(self, x):
        return self.c * x

    def vjp(self, g, y, xs, needs):
        return (self.c * g if needs[0] else None,)


class _MatMul:
    def forward(self, a, b):
        return a @ b

    def vjp(self, g, y, xs, needs):
        a, b = xs
        da = g @ b.T if needs[0] else None
        db = a.T @ g if needs[1] else None
        return da, db


class _Conv1d:
    """Grouped, dilated 1-D convolution with symmetric zero padding.

    Input (B, Cin, T), weight (Cout, Cin // groups, K); stride is fixed at 1.
    """

    def __init__(self, padding: int, dilation: int, groups: int):
        self.padding = int(padding)
        self.dilation = int(dilation)
        self.groups = int(groups)

    def forward(self, x, w):
        B, cin, T = x.shape
        cout, cg, K = w.shape
        G, p, d = self.groups, self.padding, self.dilation
        xp = np.pad(x, ((0, 0), (0, 0), (p, p))) if p else x
        tout = T + 2 * p - d * (K - 1)
        xg = xp.reshape(B, G, cin // G, -1)
        wg = w.reshape(G, cout // G, cg, K)
        out = np.zeros((B, G, cout // G, tout))
        for k in range(K):
            xk = xg[:, :, :, k * d:k * d + tout]
            out += np.einsum("bgct,goc->bgot", xk, wg[:, :, :, k])
        return out.reshape(B, cout, tout)

    def vjp(self, g, y, xs, needs):
        x, w = xs
        B, cin, T = x.shape
        cout, cg, K = w.shape
        G, p, d = self.groups, self.padding, self.dilation
        tout = y.shape[-1]
        xp = np.pad(x, ((0, 0), (0, 0), (p, p))) if p else x
        xg = xp.reshape(B, G, cin // G, -1)
        wg = w.reshape(G, cout // G, cg, K)
        gg = g.reshape(B, G, cout // G, tout)
        dx = dw = None
        if needs[1]:
            dwg = np.empty_like(wg)
            for k in range(K):
                xk = xg[:, :, :, k * d:k * d + tout]
                dwg[:, :, :, k] = np.einsum("bgot,bgct->goc", gg, xk)
            dw = dwg.reshape(w.shape)
        if needs[0]:
            dxp = np.zeros_like(xg)
            for k in range(K):
                dxp[:, :, :, k * d:k * d + tout] += np.einsum(
                    "bgot,goc->bgct", gg, wg[:, :, :, k])
            dxp = dxp.reshape(B, cin, T + 2 * p)
            dx = dxp[:, :, p:p + T] if p else dxp
            if p:
                dx = np.ascontiguousarray(dx)
        return dx, dw


class _Relu:
    def forward(self, x):
        return np.maximum(x, 0.0)

    def vjp(self, g, y, xs, needs):
        return (g * (xs[0] > 0) if needs[0] else None,)


class _Gelu:
    """Exact Gaussian-CDF form: x * Phi(x)."""

    def forward(self, x):
        return x * 0.5 * (1.0 + erf(x / _SQRT2))

    def vjp(self, g, y, xs, needs):
        if not needs[0]:
            return (None,)
        x = xs[0]
        phi_cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        phi_pdf = _PHI_SCALE * np.exp(-0.5 * x * x)
        return (g * (phi_cdf + x * phi_pdf),)


class _Sigmoid:
    def forward(self, x):
        t = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))

    def vjp(self, g, y, xs, needs):
        return (g * y * (1.0 - y) if needs[0] else None,)


class _Normalize:
    """Zero-mean unit-variance rescaling along one axis (default trailing).

    Statistics come from the values present in the call; no state is kept,
    so evaluation stays pure and per-slice outputs are independent.
    """

    def __init__(self, axis=-1):
        self.axis = axis

    def forward(self, x):
        mu = x.mean(axis=self.axis, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=self.axis, keepdims=True)
        return xc / np.sqrt(var + _BN_EPS)

    def vjp(self, g, y, xs, needs):
        if not needs[0]:
            return (None,)
        x = xs[0]
        mu = x.mean(axis=self.axis, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=self.axis, keepdims=True)
        inv = 1.0 / np.sqrt(var + _BN_EPS)
        gm = g.mean(axis=self.axis, keepdims=True)
        gym = (g * y).mean(axis=self.axis, keepdims=True)
        return (inv * (g - gm - y * gym),)


class _Mean:
    def __init__(self, axis):
        self.axis = axis

    def forward(self, x):
        return np.mean(x, axis=self.axis)

    def vjp(self, g, y, xs, needs):
        if not needs[0]:
            return (None,)
        x = xs[0]
        if self.axis is None:
            return (np.full(x.shape, g / x.size),)
        scaled = np.expand_dims(g, self.axis) / x.shape[self.axis]
        return (np.broadcast_to(scaled, x.shape),)


class _Sum:
    def __init__(self, axis):
        self.axis = axis

    def forward(self, x):
        return np.sum(x, axis=self.axis)

    def vjp(self, g, y, xs, needs):
        if not needs[0]:
            return (None,)
        x = xs[0]
        if self.axis is None:
            return (np.full(x.shape, g),)
        return (np.broadcast_to(np.expand_dims(g, self.axis), x.shape),)


class _Abs:
    def forward(self, x):
        return np.abs(x)

    def vjp(self, g, y, xs, needs):
        return (g * np.sign(xs[0]) if needs[0] else None,)


class _Dot:
    def forward(self, a, b):
        return np.asarray(np.vdot(a, b))

    def vjp(self, g, y, xs, needs):
        a, b = xs
        da = g * b if needs[0] else None
        db = g * a if needs[1] else None
        return da, db


class _DotRows:
    """Per-row inner product over flattened trailing axes: (B, ...) -> (B,)."""

    def forward(self, a, b):
        fa = a.reshape(a.shape[0], -1)
        fb = b.reshape(b.shape[0], -1)
        return (fa * fb).sum(axis=1)

    def vjp(self, g, y, xs, needs):
        a, b = xs
        gcol = g.reshape(-1, *([1] * (a.ndim - 1)))
        da = gcol * b if needs[0] else None
        db = gcol * a if needs[1] else None
        return da, db


class _Norm:
    def forward(self, x):
        return np.asarray(np.sqrt(np.vdot(x, x)))

    def vjp(self, g, y, xs, needs):
        if not needs[0]:
            return (None,)
        denom = max(float(y), 1e-300)
        return (g * xs[0] / denom,)


class _Cosine:
    """Whole-tensor cosine similarity with a zero-norm guard.

    If either norm is below NORM_EPS the value is 0 and the gradient is 0,
    so optimization never sees an undefined direction.
    """

    def forward(self, a, b):
        na = float(np.sqrt(np.vdot(a, a)))
        nb = float(np.sqrt(np.vdot(b, b)))
        if na < NORM_EPS or nb < NORM_EPS:
            return np.asarray(0.0)
        return np.asarray(np.vdot(a, b) / (na * nb))

    def vjp(self, g, y, xs, needs):
        a, b = xs
        na = float(np.sqrt(np.vdot(a, a)))
        nb = float(np.sqrt(np.vdot(b, b)))
        if na < NORM_EPS or nb < NORM_EPS:
            da = np.zeros_like(a) if needs[0] else None
            db = np.zeros_like(b) if needs[1] else None
            return da, db
        c = float(y)
        da = g * (b / (na * nb) - c * a / (na * na)) if needs[0] else None
        db = g * (a / (na * nb) - c * b / (nb * nb)) if needs[1] else None
        return da, db


class _CosineRows:
    """Per-row cosine similarity: (B, ...) x (B, ...) -> (B,), guarded rows -> 0."""

    def forward(self, a, b):
        return row_cosines(a, b)

    def vjp(self, g, y, xs, needs):
        a, b = xs
        fa = a.reshape(a.shape[0], -1)
        fb = b.reshape(b.shape[0], -1)
        na = np.sqrt((fa * fa).sum(axis=1))
        nb = np.sqrt((fb * fb).sum(axis=1))
        guarded = (na < NORM_EPS) | (nb < NORM_EPS)
        na = np.where(guarded, 1.0, na)
        nb = np.where(guarded, 1.0, nb)
        c = np.where(guarded, 0.0, y)
        gv = np.where(guarded, 0.0, g)[:, None]
        da = db = None
        if needs[0]:
            da = gv * (fb / (na * nb)[:, None] - c[:, None] * fa / (na * na)[:, None])
            da = da.reshape(a.shape)
        if needs[1]:
            db = gv * (fa / (na * nb)[:, None] - c[:, None] * fb / (nb * nb)[:, None])
            db = db.reshape(b.shape)
        return da, db


class _BceLogits:
    """Numerically stable elementwise binary cross-entropy on logits."""

    def forward(self, z, t):
        return np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def vjp(self, g, y, xs, needs):
        z, t = xs
        dz = None
        dt = None
        if needs[0]:
            e = np.exp(-np.abs(z))
            sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
            dz = g * (sig - t)
        if needs[1]:
            dt = g * (-z)
        return dz, dt


class _Reshape:
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, x):
        return x.reshape(self.shape)

    def vjp(self, g, y, xs, needs):
        return (g.reshape(xs[0].shape) if needs[0] else None,)


# ---------------------------------------------------------------------------
# nodes and builders
# ---------------------------------------------------------------------------


class Node:
    """One vertex of the computation DAG."""

    __slots__ = ("op", "parents", "shape", "name", "value")

    def __init__(self, op, parents, shape, name=None, value=None):
        self.op = op
        self.parents = parents
        self.shape = tuple(shape)
        self.name = name
        self.value = value

    def __repr__(self):
        if self.name is not None:
            return f"Node(leaf {self.name!r}, shape={self.shape})"
        if self.op is None:
            return f"Node(const, shape={self.shape})"
        return f"Node({type(self.op).__name__}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Node:
    if isinstance(x, Node):
        return x
    return constant(x)


def leaf(name: str, shape: Iterable[int]) -> Node:
    """A named placeholder bound to a value at evaluation time."""
    return Node(None, (), tuple(int(s) for s in shape), name=name)


def constant(value) -> Node:
    """A fixed tensor embedded in the graph; no gradient flows into it."""
    arr = tensor(value)
    return Node(None, (), arr.shape, value=arr)


def add(a: Node, b: Node) -> Node:
    return Node(_Add(), (a, b), _broadcast(a.shape, b.shape))


def sub(a: Node, b: Node) -> Node:
    return Node(_Sub(), (a, b), _broadcast(a.shape, b.shape))


def mul(a: Node, b: Node) -> Node:
    return Node(_Mul(), (a, b), _broadcast(a.shape, b.shape))


def scale(x: Node, c: float) -> Node:
    return Node(_Scale(c), (x,), x.shape)


def matmul(a: Node, b: Node) -> Node:
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise GraphError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return Node(_MatMul(), (a, b), (a.shape[0], b.shape[1]))


def conv1d(x: Node, w: Node, padding: int = 0, dilation: int = 1,
           groups: int = 1) -> Node:
    if len(x.shape) != 3 or len(w.shape) != 3:
        raise GraphError("conv1d expects x (B, Cin, T) and w (Cout, Cin/groups, K)")
    B, cin, T = x.shape
    cout, cg, K = w.shape
    if dilation < 1 or padding < 0 or groups < 1:
        raise GraphError("conv1d: dilation >= 1, padding >= 0, groups >= 1")
    if cin % groups or cout % groups:
        raise GraphError("conv1d: groups must divide both channel counts")
    if cg != cin // groups:
        raise GraphError(f"conv1d: weight expects {cin // groups} input channels per group, got {cg}")
    tout = T + 2 * padding - dilation * (K - 1)
    if tout < 1:
        raise GraphError("conv1d: kernel span exceeds padded input length")
    return Node(_Conv1d(padding, dilation, groups), (x, w), (B, cout, tout))


def relu(x: Node) -> Node:
    return Node(_Relu(), (x,), x.shape)


def gelu(x: Node) -> Node:
    return Node(_Gelu(), (x,), x.shape)


def sigmoid(x: Node) -> Node:
    return Node(_Sigmoid(), (x,), x.shape)


def normalize(x: Node, axis: int = -1) -> Node:
    if len(x.shape) < 1 or not -len(x.shape) <= axis < len(x.shape):
        raise GraphError("normalize axis out of range")
    if x.shape[axis] < 1:
        raise GraphError("normalize expects a nonempty axis")
    return Node(_Normalize(axis), (x,), x.shape)


def mean(x: Node, axis: int | None = None) -> Node:
    if axis is None:
        return Node(_Mean(None), (x,), ())
    axis = int(axis)
    if not -len(x.shape) <= axis < len(x.shape):
        raise GraphError(f"mean axis {axis} out of range for shape {x.shape}")
    axis %= len(x.shape)
    out = x.shape[:axis] + x.shape[axis + 1:]
    return Node(_Mean(axis), (x,), out)


def sum_(x: Node, axis: int | None = None) -> Node:
    if axis is None:
        return Node(_Sum(None), (x,), ())
    axis = int(axis)
    axis %= len(x.shape)
    out = x.shape[:axis] + x.shape[axis + 1:]
    return Node(_Sum(axis), (x,), out)


def abs_(x: Node) -> Node:
    return Node(_Abs(), (x,), x.shape)


def dot(a: Node, b: Node) -> Node:
    if int(np.prod(a.shape)) != int(np.prod(b.shape)):
        raise GraphError("dot expects operands with equal element counts")
    return Node(_Dot(), (a, b), ())


def dot_rows(a: Node, b: Node) -> Node:
    if a.shape != b.shape or len(a.shape) < 1:
        raise GraphError("dot_rows expects equal shapes with a leading batch axis")
    return Node(_DotRows(), (a, b), (a.shape[0],))


def norm(x: Node) -> Node:
    return Node(_Norm(), (x,), ())


def cosine_similarity(a: Node, b: Node) -> Node:
    if int(np.prod(a.shape)) != int(np.prod(b.shape)):
        raise GraphError("cosine_similarity expects equal element counts")
    return Node(_Cosine(), (a, b), ())


def cosine_rows(a: Node, b: Node) -> Node:
    if a.shape != b.shape or len(a.shape) < 1:
        raise GraphError("cosine_rows expects equal shapes with a leading batch axis")
    return Node(_CosineRows(), (a, b), (a.shape[0],))


def bce_with_logits(z: Node, t: Node) -> Node:
    if z.shape != t.shape:
        raise GraphError("bce_with_logits expects matching shapes")
    return Node(_BceLogits(), (z, t), z.shape)


def reshape(x: Node, shape: Iterable[int]) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != int(np.prod(x.shape)):
        raise GraphError(f"cannot reshape {x.shape} to {shape}")
    return Node(_Reshape(shape), (x,), shape)


# ---------------------------------------------------------------------------
# graph: freezing, evaluation, reverse sweep
# ---------------------------------------------------------------------------


def _topo(output: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


class Graph:
    """A frozen DAG with one scalar-or-tensor output node."""

    def __init__(self, output: Node):
        self.output = output
        self.nodes = _topo(output)
        self._index = {id(n): i for i, n in enumerate(self.nodes)}
        self._pidx = [tuple(self._index[id(p)] for p in n.parents)
                      for n in self.nodes]
        self.leaves = {n.name: n for n in self.nodes if n.name is not None}
        self._needed_cache: dict[frozenset, list[bool]] = {}

    # -- forward ------------------------------------------------------------

    def _forward(self, bindings: Mapping[str, np.ndarray]) -> list:
        vals: list = [None] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.name is not None:
                if node.name not in bindings:
                    raise GraphError(f"unbound leaf {node.name!r}")
                val = tensor(bindings[node.name])
                if val.shape != node.shape:
                    raise GraphError(
                        f"leaf {node.name!r} expects shape {node.shape}, got {val.shape}")
                vals[i] = val
            elif node.op is None:
                vals[i] = node.value
            else:
                pv = self._pidx[i]
                vals[i] = node.op.forward(*(vals[j] for j in pv))
        return vals

    def evaluate(self, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
        return self._forward(bindings)[-1]

    # -- reverse ------------------------------------------------------------

    def _needed(self, wrt: frozenset) -> list[bool]:
        cached = self._needed_cache.get(wrt)
        if cached is not None:
            return cached
        needed = [False] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.name is not None:
                needed[i] = node.name in wrt
            else:
                needed[i] = any(needed[j] for j in self._pidx[i])
        self._needed_cache[wrt] = needed
        return needed

    def value_and_grad(self, bindings: Mapping[str, np.ndarray],
                       wrt: Iterable[str]):
        """Forward value plus d(output)/d(leaf) for each requested leaf."""
        if self.output.shape != ():
            raise GraphError("gradient requires a scalar-valued output")
        wrt = frozenset(wrt)
        for name in wrt:
            if name not in bindings and name not in self.leaves:
                raise GraphError(f"gradient target {name!r} has no binding")
        vals = self._forward(bindings)
        needed = self._needed(wrt)
        grads: list = [None] * len(self.nodes)
        grads[-1] = np.asarray(1.0)
        for i in range(len(self.nodes) - 1, -1, -1):
            node, g = self.nodes[i], grads[i]
            if g is None or node.op is None:
                continue
            pv = self._pidx[i]
            needs = tuple(needed[j] for j in pv)
            if not any(needs):
                continue
            parts = node.op.vjp(g, vals[i], tuple(vals[j] for j in pv), needs)
            for j, part in zip(pv, parts):
                if part is None or not needed[j]:
                    continue
                grads[j] = part if grads[j] is None else grads[j] + part
        out: dict[str, np.ndarray] = {}
        for name in wrt:
            node = self.leaves.get(name)
            if node is None:
                out[name] = np.zeros(np.asarray(bindings[name]).shape)
            else:
                g = grads[self._index[id(node)]]
                out[name] = (np.zeros(node.shape) if g is None
                             else np.ascontiguousarray(g))
        return vals[-1], out

    def gradient(self, bindings: Mapping[str, np.ndarray],
                 wrt: Iterable[str]) -> dict[str, np.ndarray]:
        return self.value_and_grad(bindings, wrt)[1]


def evaluate(graph: Graph, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
    return graph.evaluate(bindings)


def gradient(graph: Graph, bindings: Mapping[str, np.ndarray],
             wrt: Iterable[str]) -> dict[str, np.ndarray]:
    return graph.gradient(bindings, wrt)
