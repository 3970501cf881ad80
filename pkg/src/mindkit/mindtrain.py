"""Fitting input transformations that a frozen model cannot distinguish.

The objective per batch is

    mean_i [ dist(f(X_i), f(T(X_i))) + lambda * S(X_i, T(X_i)) ]

where dist is the 1-Wasserstein distance between the two predictive
distributions (which collapses to |f - f'| for Bernoulli, point-mass, and
fixed-variance Gaussian outputs; "squared" swaps in (f - f')^2 for
closed-form cross-checks) and S penalizes the transform for staying close
to the identity: per-instance cosine similarity, per-instance inner
product, or an L1 penalty on the gate weights themselves.

Gate parameters are projected back onto [0, 1] after every optimizer step.
Model parameters are frozen throughout; only the transform learns.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import transforms as tf
from .data import Dataset, substream
from .errors import GraphError, TrainingError
from .models import Model, OUTPUT_KINDS, forward_graph, param_nodes, predict
from .optim import Adam, PlateauSchedule

SIMILARITIES = ("cosine", "inner_product", "l1_gate_weights")
DISTANCES = ("w1", "squared")

LAMBDA_GRID_LO = 1e-4
LAMBDA_GRID_HI = 1e2
LAMBDA_GRID_FACTOR = 2.0


@dataclass
class MindConfig:
    lam: float = 0.1
    similarity: str = "cosine"
    distance: str = "w1"
    clip_similarity_at_zero: bool = False
    w1_limit: float = 0.05
    cosine_limit: float = 0.5
    restarts: int = 8
    top_k: int = 5
    lr: float = 0.05
    batch_size: int | None = None
    patience: int = 10
    min_delta: float = 1e-4
    lr_floor: float = 5e-6
    max_epochs: int = 150
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise TrainingError("lambda must be nonnegative")
        if self.similarity not in SIMILARITIES:
            raise TrainingError(f"unknown similarity {self.similarity!r}")
        if self.distance not in DISTANCES:
            raise TrainingError(f"unknown distance {self.distance!r}")
        if not 1 <= self.top_k <= self.restarts:
            raise TrainingError("need 1 <= top_k <= restarts")
        if self.w1_limit <= 0 or self.cosine_limit <= 0:
            raise TrainingError("limits must be positive")
        if self.lr <= 0 or self.max_epochs < 1:
            raise TrainingError("lr and max_epochs must be positive")


@dataclass
class MindDiagnostics:
    restart: int
    epochs: int
    train_curve: list
    val_curve: list
    val_loss: float
    w1_mean: float           # validation mean |f - f'|, always the W1 form
    cosine_mean: float       # validation mean per-instance cosine
    similarity_term: float   # the S actually optimized, on validation
    gate_min: float
    gate_max: float
    stop_reason: str


def w1_reduced(model: Model, X: np.ndarray, Xp: np.ndarray):
    """1-Wasserstein distance between the predictive distributions at X and
    at Xp. For the three supported output families (Bernoulli probability,
    point mass, fixed-variance Gaussian) it equals |f(X) - f(Xp)|."""
    if model.output not in OUTPUT_KINDS:
        raise GraphError(f"unsupported output distribution {model.output!r}")
    fa, fb = predict(model, X), predict(model, Xp)
    out = np.abs(np.asarray(fa) - np.asarray(fb))
    return float(out) if out.ndim == 0 else out


def transform_params(t) -> dict[str, np.ndarray]:
    """Live parameter arrays, keyed as the loss graph names them."""
    if isinstance(t, tf.GatingTransform):
        p = {"g": t.g}
        if t.intercept:
            p["b"] = t.b
        return p
    if isinstance(t, tf.ResidualTransform):
        return t.params
    if isinstance(t, tf.BasisGatingTransform):
        p = {"gates": t.gates}
        if t.intercept:
            p["b"] = t.b
        return p
    raise GraphError(f"not a transform: {type(t).__name__}")


def _gate_key(t) -> str | None:
    if isinstance(t, tf.GatingTransform):
        return "g"
    if isinstance(t, tf.BasisGatingTransform):
        return "gates"
    return None


def _decay_keys(t) -> tuple:
    # Weight decay never touches gates (it would bias scores toward 0).
    # It does cover intercepts and residual conv weights: an undecayed
    # intercept can buy the whole similarity reduction by drifting far
    # from the identity while every gate stays parked at 1.
    if isinstance(t, tf.ResidualTransform):
        return tuple(k for k in t.params if k.endswith("_w"))
    return ("b",) if "b" in transform_params(t) else ()


def apply_transform(t, X: np.ndarray, basis: tf.BasisSet | None = None,
                    seq: bool | None = None):
    if isinstance(t, tf.GatingTransform):
        return tf.apply_gating(t, X, seq=seq)
    if isinstance(t, tf.ResidualTransform):
        return tf.apply_residual(t, X)
    return tf.apply_basis_gating(t, basis, X)


class _Problem:
    """Loss/metric graphs for one transform family, cached per batch size."""

    def __init__(self, model: Model, transform, config: MindConfig,
                 basis: tf.BasisSet | None):
        self.model = model
        self.transform = transform
        self.config = config
        self.basis = basis
        self.seq = model.seq_len is not None
        if config.similarity == "l1_gate_weights" and _gate_key(transform) is None:
            raise TrainingError(
                "l1_gate_weights similarity needs a gated transform family")
        self._graphs: dict[int, dict[str, dc.Graph]] = {}

    def _build(self, B: int) -> dict[str, dc.Graph]:
        cfg = self.config
        t = self.transform
        d = self.model.input_dim
        T = self.model.seq_len
        xshape = (B, d, T) if self.seq else (B, d)
        x = dc.leaf("x", xshape)
        if isinstance(t, tf.GatingTransform):
            g = dc.leaf("g", (d,))
            b = dc.leaf("b", (d,)) if t.intercept else None
            xp = tf.gating_graph(x, g, b, seq=self.seq)
            gates_leaf = g
        elif isinstance(t, tf.ResidualTransform):
            nodes = {k: dc.leaf(k, v.shape) for k, v in t.params.items()}
            xp = tf.residual_graph(x, nodes, d, t.blocks, t.kernel)
            gates_leaf = None
        else:
            C = t.n_channels
            z = dc.leaf("z", (B, d * C, T))
            gates = dc.leaf("gates", (d, C))
            b = dc.leaf("b", (d,)) if t.intercept else None
            xp = tf.basis_gating_graph(z, gates, b, d, C)
            gates_leaf = gates
        f = forward_graph(self.model, xp, param_nodes(self.model, trainable=False))
        fc = dc.leaf("fc", (B,))
        diff = dc.sub(f, fc)
        dist_vec = dc.abs_(diff) if cfg.distance == "w1" else dc.mul(diff, diff)
        dist = dc.mean(dist_vec)
        if cfg.similarity == "cosine":
            sims = dc.cosine_rows(xp, x)
            if cfg.clip_similarity_at_zero:
                sims = dc.relu(sims)
            sim = dc.mean(sims)
        elif cfg.similarity == "inner_product":
            sim = dc.mean(dc.dot_rows(xp, x))
        else:
            sim = dc.sum_(dc.abs_(gates_leaf))
        loss = dist if cfg.lam == 0 else dc.add(dist, dc.scale(sim, cfg.lam))
        return {"loss": dc.Graph(loss), "dist": dc.Graph(dist),
                "sim": dc.Graph(sim)}

    def _graphs_for(self, B: int) -> dict[str, dc.Graph]:
        if B not in self._graphs:
            self._graphs[B] = self._build(B)
        return self._graphs[B]

    def bindings(self, X: np.ndarray, fc: np.ndarray,
                 Z: np.ndarray | None) -> dict:
        binds = dict(transform_params(self.transform))
        binds["x"] = X
        binds["fc"] = fc
        if isinstance(self.transform, tf.BasisGatingTransform):
            binds["z"] = Z
        return binds

    def value_and_grad(self, X, fc, Z):
        g = self._graphs_for(len(X))["loss"]
        names = list(transform_params(self.transform))
        return g.value_and_grad(self.bindings(X, fc, Z), wrt=names)

    def loss(self, X, fc, Z) -> float:
        g = self._graphs_for(len(X))["loss"]
        return float(g.evaluate(self.bindings(X, fc, Z)))

    def terms(self, X, fc, Z) -> tuple[float, float]:
        gs = self._graphs_for(len(X))
        binds = self.bindings(X, fc, Z)
        return float(gs["dist"].evaluate(binds)), float(gs["sim"].evaluate(binds))


def mind_loss(model: Model, transform, X: np.ndarray, config: MindConfig,
              basis: tf.BasisSet | None = None) -> float:
    """Objective value on one batch, for the transform's current parameters."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == (1 if model.seq_len is None else 2):
        X = X[None]
    problem = _Problem(model, transform, config, basis)
    fc = np.atleast_1d(predict(model, X))
    Z = tf.gating_channels(basis, X) \
        if isinstance(transform, tf.BasisGatingTransform) else None
    return problem.loss(X, fc, Z)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train_transform(model: Model, tspec: tf.TransformSpec, dataset: Dataset,
                    config: MindConfig, *, restart: int = 0):
    """One seeded fit; returns (transform, MindDiagnostics).

    The transform whose validation objective was lowest across epochs is
    returned, with gates clamped to [0, 1] after every step along the way.
    """
    Xtr, _ = dataset.split("train")
    Xva, _ = dataset.split("validation")
    rng = substream(config.seed, f"mind.init.restart{restart}")
    shuffle_rng = substream(config.seed, f"mind.shuffle.restart{restart}")
    transform = tf.init_transform(tspec, dataset.d, dataset.seq_len, rng)
    basis = tspec.basis

    fc_tr = np.atleast_1d(predict(model, Xtr))
    fc_va = np.atleast_1d(predict(model, Xva))
    Ztr = Zva = None
    if tspec.kind == "basis":
        Ztr = tf.gating_channels(basis, Xtr)
        Zva = tf.gating_channels(basis, Xva)

    problem = _Problem(model, transform, config, basis)
    params = transform_params(transform)
    opt = Adam(params, lr=config.lr, weight_decay=config.weight_decay,
               decay_keys=_decay_keys(transform))
    sched = PlateauSchedule(config.patience, config.min_delta, config.lr_floor)
    bs = config.batch_size or min(100, max(1, len(Xtr) // 4))
    gate_key = _gate_key(transform)

    train_curve: list[float] = []
    val_curve: list[float] = []
    gate_min, gate_max = np.inf, -np.inf
    best_loss, best_params = np.inf, None
    stop_reason = "max_epochs"
    epoch = 0

    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(len(Xtr))
        total, count = 0.0, 0
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            Zb = None if Ztr is None else Ztr[idx]
            loss, grads = problem.value_and_grad(Xtr[idx], fc_tr[idx], Zb)
            loss = float(loss)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite transform loss (restart {restart}, epoch {epoch})")
            opt.step(grads)
            tf.clamp_gates(transform)
            if gate_key is not None:
                gates = params[gate_key]
                gate_min = min(gate_min, float(gates.min()))
                gate_max = max(gate_max, float(gates.max()))
            total += loss * len(idx)
            count += len(idx)
        val_loss = problem.loss(Xva, fc_va, Zva)
        if not np.isfinite(val_loss):
            raise TrainingError(
                f"non-finite validation objective (restart {restart}, epoch {epoch})")
        train_curve.append(total / count)
        val_curve.append(val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            best_params = {k: v.copy() for k, v in params.items()}
        if not sched.update(val_loss, opt):
            stop_reason = "lr_floor"
            break

    if best_params is not None:
        for k, v in best_params.items():
            np.copyto(params[k], v)

    Xp_va = apply_transform(transform, Xva, basis,
                            seq=dataset.seq_len is not None)
    w1_mean = float(np.mean(w1_reduced(model, Xva, Xp_va)))
    cos_mean = float(np.mean(dc.row_cosines(Xva, Xp_va)))
    _, sim_term = problem.terms(Xva, fc_va, Zva)
    diag = MindDiagnostics(
        restart=restart, epochs=epoch + 1, train_curve=train_curve,
        val_curve=val_curve, val_loss=best_loss, w1_mean=w1_mean,
        cosine_mean=cos_mean, similarity_term=sim_term,
        gate_min=gate_min if gate_key else float("nan"),
        gate_max=gate_max if gate_key else float("nan"),
        stop_reason=stop_reason)
    return transform, diag


# ---------------------------------------------------------------------------
# lambda tuning
# ---------------------------------------------------------------------------


def lambda_grid(lo: float = LAMBDA_GRID_LO, hi: float = LAMBDA_GRID_HI,
                factor: float = LAMBDA_GRID_FACTOR) -> list[float]:
    grid = []
    lam = lo
    while lam <= hi * (1 + 1e-12):
        grid.append(lam)
        lam *= factor
    return grid


@dataclass
class TuneResult:
    lam: float
    feasible: bool
    transform: object
    diagnostics: MindDiagnostics
    trace: list[dict] = field(default_factory=list)


def tune_lambda(model: Model, tspec: tf.TransformSpec, dataset: Dataset,
                config: MindConfig, grid: list[float] | None = None) -> TuneResult:
    """Smallest grid lambda whose fitted transform keeps the validation W1
    within w1_limit and the validation cosine within cosine_limit.

    If no grid point satisfies both, the least-violating point is returned
    with feasible=False.
    """
    grid = sorted(grid) if grid else lambda_grid()
    trace: list[dict] = []
    best = None
    best_violation = np.inf
    for lam in grid:
        cfg = replace(config, lam=lam)
        transform, diag = train_transform(model, tspec, dataset, cfg, restart=0)
        ok = (diag.w1_mean <= config.w1_limit
              and diag.cosine_mean <= config.cosine_limit)
        trace.append({"lambda": lam, "w1": diag.w1_mean,
                      "cosine": diag.cosine_mean, "val_loss": diag.val_loss,
                      "feasible": ok})
        if ok:
            return TuneResult(lam, True, transform, diag, trace)
        violation = max(diag.w1_mean / config.w1_limit,
                        diag.cosine_mean / config.cosine_limit)
        if violation < best_violation:
            best_violation = violation
            best = (lam, transform, diag)
    lam, transform, diag = best
    return TuneResult(lam, False, transform, diag, trace)


# ---------------------------------------------------------------------------
# restarts
# ---------------------------------------------------------------------------


@dataclass
class MindResult:
    score_kind: str            # "gates" | "gates_by_channel" | "correlation"
    samples: np.ndarray        # raw top-k score stack, selected-run order
    mean: np.ndarray
    std: np.ndarray
    rho_mean: np.ndarray
    rho_std: np.ndarray
    selected: list[int]
    failed: list[int]
    diagnostics: list[MindDiagnostics]
    transforms: list
    lam: float

    def feature_scores(self) -> np.ndarray:
        """Per-feature summary: channel gates average over channels."""
        return self.mean.mean(axis=1) if self.mean.ndim == 2 else self.mean

    def feature_spread(self) -> np.ndarray:
        """Per-feature std over selected runs (channel gates averaged
        within each run first, population std across runs)."""
        per_run = self.samples.mean(axis=2) if self.samples.ndim == 3 \
            else self.samples
        return per_run.std(axis=0)


def _score_vector(t) -> np.ndarray:
    if isinstance(t, tf.GatingTransform):
        return t.g.copy()
    if isinstance(t, tf.BasisGatingTransform):
        return t.gates.copy()
    raise GraphError("residual transforms carry no gates")


def _run_restart(args):
    model, tspec, dataset, config, r = args
    try:
        transform, diag = train_transform(model, tspec, dataset, config,
                                          restart=r)
        return r, transform, diag, None
    except TrainingError as exc:
        return r, None, None, str(exc)


def multi_restart(model: Model, tspec: tf.TransformSpec, dataset: Dataset,
                  config: MindConfig, threads: int = 1) -> MindResult:
    """R independently seeded fits; aggregate the top_k by validation loss.

    Scores are the gates for gated families and the per-feature correlation
    profile for the residual family. Mean and std use the selected runs
    (population std, so a single selected run reports zero spread).
    """
    from . import analysis  # deferred: analysis imports this module

    jobs = [(model, tspec, dataset, config, r) for r in range(config.restarts)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_run_restart, jobs))
    else:
        outcomes = [_run_restart(j) for j in jobs]

    runs = [(r, t, d) for r, t, d, err in outcomes if t is not None]
    failed = [r for r, t, _, _ in outcomes if t is None]
    if len(runs) < config.top_k:
        raise TrainingError(
            f"only {len(runs)} of {config.restarts} restarts succeeded; "
            f"top_k={config.top_k} requires at least that many")
    runs.sort(key=lambda item: item[2].val_loss)
    top = runs[:config.top_k]

    Xva, _ = dataset.split("validation")
    rho_rows = []
    for _, t, _ in top:
        Xp = apply_transform(t, Xva, tspec.basis,
                             seq=dataset.seq_len is not None)
        rho_rows.append(analysis.correlation_profile(Xva, Xp))
    rho = np.stack(rho_rows)

    if tspec.kind == "residual":
        score_kind = "correlation"
        scores = rho
    else:
        score_kind = "gates" if tspec.kind == "gating" else "gates_by_channel"
        scores = np.stack([_score_vector(t) for _, t, _ in top])

    return MindResult(
        score_kind=score_kind, samples=scores,
        mean=scores.mean(axis=0), std=scores.std(axis=0),
        rho_mean=rho.mean(axis=0), rho_std=rho.std(axis=0),
        selected=[r for r, _, _ in top], failed=failed,
        diagnostics=[d for _, _, d in runs],
        transforms=[t for _, t, _ in top],
        lam=config.lam)
