"""Parameterized input transformations whose fitted parameters expose
what a model ignores.

Three families:

* gating: per-feature multiplicative gates in [0, 1] plus an optional
  unconstrained per-feature intercept. A gate near 0 marks a feature the
  model is invariant to.
* residual: two convolutional residual blocks acting along time; free-form,
  interpreted afterwards through correlation profiles rather than gates.
* basis gating: each feature's series is split into interpretable temporal
  channels (orthonormal-basis projections, or disjoint time windows) and
  each channel gets its own gate.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import GraphError

GATE_INIT_NOISE = 0.02
RESIDUAL_KERNEL = 5
RESIDUAL_BLOCKS = 2
RESIDUAL_HIDDEN_SCALE = 3


def clip01(arr: np.ndarray) -> np.ndarray:
    """Box projection onto [0, 1]; idempotent."""
    return np.minimum(np.maximum(arr, 0.0), 1.0)


# ---------------------------------------------------------------------------
# transform containers
# ---------------------------------------------------------------------------


@dataclass
class GatingTransform:
    """x -> g * x + b with g in [0, 1]^d; b optional and unconstrained."""

    g: np.ndarray
    b: np.ndarray
    intercept: bool = True

    @property
    def d(self) -> int:
        return self.g.shape[0]


@dataclass
class ResidualTransform:
    """Stacked residual blocks x + conv2(relu(normalize(conv1(x)))).

    conv1 maps d -> hidden channels (kernel 5, same padding, no bias);
    conv2 maps back with a bias. Zero conv2 weights give the identity map.
    """

    params: dict[str, np.ndarray]
    d: int
    hidden: int
    blocks: int = RESIDUAL_BLOCKS
    kernel: int = RESIDUAL_KERNEL


@dataclass
class BasisSet:
    """Orthonormal temporal directions plus channel-routing metadata.

    chebyshev: the first K polynomials sampled on a uniform grid and
    re-orthonormalized discretely; with `residual_channel` on, encoding adds
    the projection remainder as a final channel so decoding is lossless.
    pulse: K contiguous equal windows with unit-norm indicator vectors;
    gating routes each window's full signal, so the split is lossless by
    construction.
    """

    kind: str
    vectors: np.ndarray          # (K, T), rows orthonormal
    residual_channel: bool

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def T(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_channels(self) -> int:
        return self.K + (1 if self.residual_channel else 0)

    def channel_names(self) -> list[str]:
        if self.kind == "chebyshev":
            names = ["mean", "linear", "quadratic"][:self.K]
            names += [f"poly{k}" for k in range(3, self.K)]
            if self.residual_channel:
                names.append("residual")
            return names
        return [f"window{k}" for k in range(self.K)]


@dataclass
class BasisGatingTransform:
    """One gate per (feature, temporal channel), optional per-feature intercept."""

    gates: np.ndarray            # (d, C) in [0, 1]
    b: np.ndarray                # (d,)
    intercept: bool = False

    @property
    def d(self) -> int:
        return self.gates.shape[0]

    @property
    def n_channels(self) -> int:
        return self.gates.shape[1]


@dataclass
class TransformSpec:
    """Which family to fit, and its structural options."""

    kind: str = "gating"
    intercept: bool = True
    basis: BasisSet | None = None

    def __post_init__(self):
        if self.kind not in ("gating", "residual", "basis"):
            raise GraphError(f"unknown transform kind {self.kind!r}")
        if self.kind == "basis" and self.basis is None:
            raise GraphError("basis transform requires a BasisSet")


def init_transform(spec: TransformSpec, d: int, seq_len: int | None,
                   rng: np.random.Generator):
    """Near-identity start: gates at 1 jittered by N(0, 0.02^2), clamped."""
    if spec.kind == "gating":
        g = clip01(1.0 + rng.normal(0.0, GATE_INIT_NOISE, d))
        return GatingTransform(g, np.zeros(d), intercept=spec.intercept)
    if spec.kind == "residual":
        if seq_len is None:
            raise GraphError("residual transform requires sequence data")
        hidden = RESIDUAL_HIDDEN_SCALE * d
        params: dict[str, np.ndarray] = {}
        for i in range(RESIDUAL_BLOCKS):
            fan_in = d * RESIDUAL_KERNEL
            params[f"block{i}_conv1_w"] = rng.normal(
                0.0, np.sqrt(2.0 / fan_in), (hidden, d, RESIDUAL_KERNEL))
            params[f"block{i}_conv2_w"] = rng.normal(
                0.0, GATE_INIT_NOISE, (d, hidden, RESIDUAL_KERNEL))
            params[f"block{i}_conv2_b"] = np.zeros(d)
        return ResidualTransform(params, d, hidden)
    basis = spec.basis
    if seq_len is None:
        raise GraphError("basis transform requires sequence data")
    if basis.T != seq_len:
        raise GraphError(f"basis built for T={basis.T}, data has T={seq_len}")
    gates = clip01(1.0 + rng.normal(0.0, GATE_INIT_NOISE, (d, basis.n_channels)))
    return BasisGatingTransform(gates, np.zeros(d), intercept=spec.intercept)


# ---------------------------------------------------------------------------
# temporal bases
# ---------------------------------------------------------------------------


def make_basis(kind: str, T: int, K: int | None = None,
               residual_channel: bool | None = None) -> BasisSet:
    """Construct an orthonormal temporal basis of length T."""
    if kind == "chebyshev":
        K = 3 if K is None else int(K)
        if not 1 <= K <= T:
            raise GraphError(f"need 1 <= K <= T, got K={K}, T={T}")
        grid = np.linspace(-1.0, 1.0, T)
        raw = np.stack([np.polynomial.chebyshev.Chebyshev.basis(k)(grid)
                        for k in range(K)])
        vectors = _orthonormalize(raw)
        residual = True if residual_channel is None else residual_channel
        return BasisSet("chebyshev", vectors, residual)
    if kind == "pulse":
        K = 4 if K is None else int(K)
        if K < 1 or T % K != 0:
            raise GraphError(f"pulse basis needs K dividing T, got K={K}, T={T}")
        width = T // K
        vectors = np.zeros((K, T))
        for k in range(K):
            vectors[k, k * width:(k + 1) * width] = 1.0 / np.sqrt(width)
        residual = False if residual_channel is None else residual_channel
        return BasisSet("pulse", vectors, residual)
    raise GraphError(f"unknown basis kind {kind!r}")


def _orthonormalize(rows: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt on the row vectors."""
    out = rows.astype(np.float64).copy()
    for i in range(len(out)):
        for j in range(i):
            out[i] -= (out[i] @ out[j]) * out[j]
        nrm = np.linalg.norm(out[i])
        if nrm < 1e-12:
            raise GraphError("basis rows are linearly dependent")
        out[i] /= nrm
    return out


def encode(basis: BasisSet, x: np.ndarray) -> np.ndarray:
    """Project one series onto the basis: component k = <x, a_k> a_k.

    With the residual channel enabled a final component x - sum(components)
    is appended, which makes decode(encode(x)) exact.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (basis.T,):
        raise GraphError(f"encode expects a series of length {basis.T}")
    coeffs = basis.vectors @ x
    comps = coeffs[:, None] * basis.vectors
    if basis.residual_channel:
        comps = np.vstack([comps, x - comps.sum(axis=0)])
    return comps


def decode(components: np.ndarray) -> np.ndarray:
    """Sum the component series back into one series."""
    components = np.asarray(components, dtype=np.float64)
    if components.ndim != 2:
        raise GraphError("decode expects a (channels, T) array")
    return components.sum(axis=0)


def window_split(basis: BasisSet, x: np.ndarray) -> np.ndarray:
    """Route the full signal through disjoint windows: component k = x * 1_k.

    Only defined for the pulse basis; the components sum to x exactly.
    """
    if basis.kind != "pulse":
        raise GraphError("window routing is only defined for the pulse basis")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (basis.T,):
        raise GraphError(f"window_split expects a series of length {basis.T}")
    masks = (basis.vectors > 0).astype(np.float64)
    return masks * x[None, :]


def gating_channels(basis: BasisSet, X: np.ndarray) -> np.ndarray:
    """Lossless per-feature channel stack actually scaled by the gates.

    X is (B, d, T); the result is (B, d * C, T) ordered feature-major.
    chebyshev uses basis projections plus the residual channel; pulse uses
    window routing. Either way the channels of one feature sum back to the
    original series.
    """
    B, d, T = X.shape
    if T != basis.T:
        raise GraphError(f"basis built for T={basis.T}, data has T={T}")
    if basis.kind == "pulse":
        masks = (basis.vectors > 0).astype(np.float64)
        comps = X[:, :, None, :] * masks[None, None, :, :]
    else:
        coeffs = np.einsum("bdt,kt->bdk", X, basis.vectors)
        comps = coeffs[:, :, :, None] * basis.vectors[None, None, :, :]
        if basis.residual_channel:
            resid = X - comps.sum(axis=2)
            comps = np.concatenate([comps, resid[:, :, None, :]], axis=2)
    C = comps.shape[2]
    return comps.reshape(B, d * C, T)


# ---------------------------------------------------------------------------
# graph builders (shared by value-level apply and the fitting loop)
# ---------------------------------------------------------------------------


def gating_graph(x: dc.Node, g: dc.Node, b: dc.Node | None,
                 seq: bool) -> dc.Node:
    d = g.shape[0]
    if seq:
        g = dc.reshape(g, (d, 1))
        b = None if b is None else dc.reshape(b, (d, 1))
    out = dc.mul(x, g)
    return out if b is None else dc.add(out, b)


def residual_graph(x: dc.Node, params: dict[str, dc.Node], d: int,
                   blocks: int = RESIDUAL_BLOCKS,
                   kernel: int = RESIDUAL_KERNEL) -> dc.Node:
    pad = (kernel - 1) // 2
    h = x
    for i in range(blocks):
        inner = dc.conv1d(h, params[f"block{i}_conv1_w"], padding=pad)
        inner = dc.relu(dc.normalize(inner))
        inner = dc.conv1d(inner, params[f"block{i}_conv2_w"], padding=pad)
        inner = dc.add(inner, dc.reshape(params[f"block{i}_conv2_b"], (d, 1)))
        h = dc.add(h, inner)
    return h


def basis_gating_graph(z: dc.Node, gates: dc.Node, b: dc.Node | None,
                       d: int, C: int) -> dc.Node:
    """Gate the channel stack with a grouped kernel-1 convolution."""
    w = dc.reshape(gates, (d, C, 1))
    out = dc.conv1d(z, w, groups=d)
    return out if b is None else dc.add(out, dc.reshape(b, (d, 1)))


# ---------------------------------------------------------------------------
# value-level application
# ---------------------------------------------------------------------------


def _batched(X: np.ndarray, want_seq: bool) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    expected = 3 if want_seq else 2
    if X.ndim == expected - 1:
        return X[None], True
    if X.ndim != expected:
        raise GraphError(f"expected {expected - 1}-D or {expected}-D input")
    return X, False


def apply_gating(t: GatingTransform, X: np.ndarray,
                 seq: bool | None = None) -> np.ndarray:
    """Gate one instance or a batch; features live on axis 0 of a single
    instance and axis 1 of a batch.

    A square 2-D input is ambiguous; pass seq=True for one (d, T)
    sequence or seq=False for a (B, d) batch. Left to infer, a 2-D input
    whose leading axis matches d reads as a single sequence.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        Xb, single, seq = X[None], True, False
    elif X.ndim == 3:
        Xb, single, seq = X, False, True
    elif X.ndim == 2 and (seq or (seq is None and X.shape[0] == t.d)):
        Xb, single, seq = X[None], True, True
    elif X.ndim == 2 and X.shape[1] == t.d:
        Xb, single, seq = X, False, False
    else:
        raise GraphError(f"gating transform expects {t.d} features")
    if Xb.shape[1] != t.d:
        raise GraphError(f"gating transform expects {t.d} features")
    x = dc.leaf("x", Xb.shape)
    g = dc.constant(t.g)
    b = dc.constant(t.b) if t.intercept else None
    out = dc.Graph(gating_graph(x, g, b, seq=seq)).evaluate({"x": Xb})
    return out[0] if single else out


def apply_residual(t: ResidualTransform, X: np.ndarray) -> np.ndarray:
    Xb, single = _batched(X, want_seq=True)
    if Xb.shape[1] != t.d:
        raise GraphError(f"residual transform expects {t.d} features")
    x = dc.leaf("x", Xb.shape)
    nodes = {k: dc.constant(v) for k, v in t.params.items()}
    out = dc.Graph(residual_graph(x, nodes, t.d, t.blocks, t.kernel))
    val = out.evaluate({"x": Xb})
    return val[0] if single else val


def apply_basis_gating(t: BasisGatingTransform, basis: BasisSet,
                       X: np.ndarray) -> np.ndarray:
    Xb, single = _batched(X, want_seq=True)
    if Xb.shape[1] != t.d:
        raise GraphError(f"basis gating expects {t.d} features")
    if t.n_channels != basis.n_channels:
        raise GraphError("transform and basis disagree on channel count")
    Z = gating_channels(basis, Xb)
    z = dc.leaf("z", Z.shape)
    gates = dc.constant(t.gates)
    b = dc.constant(t.b) if t.intercept else None
    out = dc.Graph(basis_gating_graph(z, gates, b, t.d, basis.n_channels))
    val = out.evaluate({"z": Z})
    return val[0] if single else val


def clamp_gates(t):
    """Project every gate parameter onto [0, 1] in place; returns t.

    Intercepts and residual convolution weights are left untouched.
    """
    if isinstance(t, GatingTransform):
        np.copyto(t.g, clip01(t.g))
    elif isinstance(t, BasisGatingTransform):
        np.copyto(t.gates, clip01(t.gates))
    elif not isinstance(t, ResidualTransform):
        raise GraphError(f"not a transform: {type(t).__name__}")
    return t


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_transform(t, path, basis: BasisSet | None = None) -> None:
    if isinstance(t, GatingTransform):
        doc = {"kind": "gating", "intercept": t.intercept,
               "params": {"g": t.g.tolist(), "b": t.b.tolist()}}
    elif isinstance(t, ResidualTransform):
        doc = {"kind": "residual", "d": t.d, "hidden": t.hidden,
               "blocks": t.blocks, "kernel": t.kernel,
               "params": {k: {"shape": list(v.shape),
                              "data": v.ravel().tolist()}
                          for k, v in t.params.items()}}
    elif isinstance(t, BasisGatingTransform):
        if basis is None:
            raise GraphError("saving a basis transform requires its BasisSet")
        doc = {"kind": "basis", "intercept": t.intercept,
               "basis": {"kind": basis.kind, "K": basis.K, "T": basis.T,
                         "residual_channel": basis.residual_channel},
               "params": {"gates": t.gates.tolist(), "b": t.b.tolist()}}
    else:
        raise GraphError(f"not a transform: {type(t).__name__}")
    doc = {"schema": "mindkit.transform/1", **doc}
    Path(path).write_text(json.dumps(doc) + "\n")


def load_transform(path):
    """Returns (transform, basis_or_None)."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise GraphError(f"cannot read transform checkpoint {path}: {exc}") from exc
    if doc.get("schema") != "mindkit.transform/1":
        raise GraphError(f"not a transform checkpoint: {path}")
    kind = doc["kind"]
    if kind == "gating":
        t = GatingTransform(np.array(doc["params"]["g"], dtype=np.float64),
                            np.array(doc["params"]["b"], dtype=np.float64),
                            intercept=doc["intercept"])
        return t, None
    if kind == "residual":
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in doc["params"].items()}
        return ResidualTransform(params, doc["d"], doc["hidden"],
                                 doc["blocks"], doc["kernel"]), None
    info = doc["basis"]
    basis = make_basis(info["kind"], info["T"], info["K"],
                       info["residual_channel"])
    t = BasisGatingTransform(np.array(doc["params"]["gates"], dtype=np.float64),
                             np.array(doc["params"]["b"], dtype=np.float64),
                             intercept=doc["intercept"])
    return t, basis
