"""Score analysis: closed forms, gradient baselines, and sanity checks.

Everything here treats the model as a black box with gradients. The
closed-form solver covers the one case with an exact answer (linear
point-mass model, squared distance, inner-product similarity, pure
feature gates); the rest are empirical tools for judging learned gates.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import special

from . import diffcore as dc
from . import transforms as tf
from .data import Dataset, substream
from .errors import AnalysisError, TrainingError
from .schemas import jsonsafe
from .models import Model, forward_graph, param_nodes, predict, shuffle_layer

RIDGE = 1e-8
COND_LIMIT = 1e12


def correlation_profile(X: np.ndarray, Xp: np.ndarray) -> np.ndarray:
    """Per-feature Pearson correlation between original and transformed
    values, pooled over samples (and time, for sequences).

    A feature with zero variance on either side gets NaN: correlation is
    undefined there and the caller should treat the score as flagged.
    """
    X = np.asarray(X, dtype=np.float64)
    Xp = np.asarray(Xp, dtype=np.float64)
    if X.shape != Xp.shape or X.ndim not in (2, 3):
        raise AnalysisError("need matching (n, d) or (n, d, T) arrays")
    if X.ndim == 3:
        X = np.swapaxes(X, 1, 2).reshape(-1, X.shape[1])
        Xp = np.swapaxes(Xp, 1, 2).reshape(-1, Xp.shape[1])
    a = X - X.mean(axis=0)
    b = Xp - Xp.mean(axis=0)
    va = (a * a).sum(axis=0)
    vb = (b * b).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = (a * b).sum(axis=0) / np.sqrt(va * vb)
    rho[(va <= 0) | (vb <= 0)] = np.nan
    return rho


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------


def second_moment(X: np.ndarray) -> np.ndarray:
    """Empirical second-moment matrix (1/n) sum_i x_i x_i'."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise AnalysisError("second_moment expects an (n, d) matrix")
    return X.T @ X / len(X)


@dataclass
class ClosedFormInputs:
    """Everything the exact gating solution needs: linear-model
    coefficients, the input second-moment matrix, and the penalty weight."""
    beta: np.ndarray
    moment: np.ndarray
    lam: float

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).ravel()
        self.moment = np.asarray(self.moment, dtype=np.float64)
        d = self.beta.size
        if self.moment.shape != (d, d):
            raise AnalysisError("moment matrix must be (d, d) matching beta")
        if not np.allclose(self.moment, self.moment.T, atol=1e-10):
            raise AnalysisError("moment matrix must be symmetric")
        if float(np.linalg.eigvalsh(self.moment)[0]) < -1e-8:
            raise AnalysisError("moment matrix must be positive semidefinite")
        if self.lam < 0:
            raise AnalysisError("lambda must be nonnegative")


@dataclass
class ClosedFormSolution:
    gates: np.ndarray       # box-projected minimizer in [0, 1]^d
    unclamped: np.ndarray   # stationary point before projection
    matrix: np.ndarray      # the (possibly ridged) quadratic-form matrix
    degenerate: bool        # condition blew past COND_LIMIT; ridge applied


def closed_form_gating(inputs: ClosedFormInputs) -> ClosedFormSolution:
    """Exact gates for a linear model f(x) = beta.x under the squared
    distance and inner-product similarity, with intercept-free gating.

    The objective is quadratic in the gates:

        (g - 1)' M (g - 1) + lam * g' c,   M = diag(beta) C diag(beta)

    with C the second-moment matrix and c its diagonal. The stationary
    point is g = 1 - (lam / 2) M^{-1} c, projected onto [0, 1]^d.
    Projection is exact whenever no coordinate clamps or M is diagonal;
    for clamped correlated problems it is a fast approximation and callers
    wanting exactness should check that `unclamped` stayed inside the box.
    A near-singular M (a zero coefficient, or exactly collinear features)
    falls back to a small ridge and is flagged degenerate.
    """
    beta, C, lam = inputs.beta, inputs.moment, inputs.lam
    M = C * np.outer(beta, beta)
    c = np.diag(C).copy()
    cond = np.linalg.cond(M)
    degenerate = bool(not np.isfinite(cond) or cond > COND_LIMIT)
    if degenerate:
        M = M + RIDGE * np.eye(beta.size)
    unclamped = 1.0 - (lam / 2.0) * np.linalg.solve(M, c)
    return ClosedFormSolution(gates=tf.clip01(unclamped), unclamped=unclamped,
                              matrix=M, degenerate=degenerate)


def weak_invariance_lambda(sensitivity: float, samples: np.ndarray) -> float:
    """Penalty strength guaranteeing the optimal gate on this feature is
    exactly zero, for any model whose output moves at most `sensitivity`
    per unit change of the feature: sensitivity * sum|x_i| / sum(x_i^2).
    """
    if sensitivity < 0:
        raise AnalysisError("sensitivity bound must be nonnegative")
    x = np.asarray(samples, dtype=np.float64).ravel()
    sumsq = float((x * x).sum())
    if sumsq == 0.0:
        raise AnalysisError("feature is identically zero; threshold undefined")
    return sensitivity * float(np.abs(x).sum()) / sumsq


# ---------------------------------------------------------------------------
# gradient attribution baselines
# ---------------------------------------------------------------------------


def _batch_input_gradient(model: Model, X: np.ndarray) -> np.ndarray:
    """d(sum_i f(X_i))/dX: row i is the gradient at sample i."""
    x = dc.leaf("x", X.shape)
    f = forward_graph(model, x, param_nodes(model, trainable=False))
    graph = dc.Graph(dc.sum_(f))
    return graph.gradient({"x": X}, wrt=["x"])["x"]


def _as_model_batch(model: Model, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    want = 2 if model.seq_len is None else 3
    if X.ndim == want - 1:
        X = X[None]
    if X.ndim != want:
        raise AnalysisError(f"expected a batch with {want} axes, got {X.ndim}")
    return X


def saliency_scores(model: Model, X: np.ndarray) -> np.ndarray:
    """Mean absolute input gradient per feature (pooled over time for
    sequence models). For a linear model this is exactly |beta|."""
    X = _as_model_batch(model, X)
    G = np.abs(_batch_input_gradient(model, X))
    if G.ndim == 3:
        return G.mean(axis=(0, 2))
    return G.mean(axis=0)


def integrated_gradients(model: Model, X: np.ndarray,
                         steps: int = 128) -> np.ndarray:
    """Per-sample attribution maps against a zero baseline.

    The path integral uses a midpoint Riemann sum, so the completeness
    identity sum_j IG_j = f(x) - f(0) holds to the sum's resolution.
    """
    if steps < 1:
        raise AnalysisError("steps must be positive")
    X = _as_model_batch(model, X)
    acc = np.zeros_like(X)
    for k in range(steps):
        alpha = (k + 0.5) / steps
        acc += _batch_input_gradient(model, alpha * X)
    return X * acc / steps


def integrated_gradients_scores(model: Model, X: np.ndarray,
                                steps: int = 128) -> np.ndarray:
    """Mean |IG| per feature, pooled over samples (and time)."""
    maps = np.abs(integrated_gradients(model, X, steps))
    if maps.ndim == 3:
        return maps.mean(axis=(0, 2))
    return maps.mean(axis=0)


def completeness_gap(model: Model, X: np.ndarray, steps: int = 128) -> float:
    """Largest violation of the IG completeness identity over the batch."""
    X = _as_model_batch(model, X)
    maps = integrated_gradients(model, X, steps)
    totals = maps.sum(axis=tuple(range(1, maps.ndim)))
    f_x = np.atleast_1d(predict(model, X))
    f_0 = np.atleast_1d(predict(model, np.zeros_like(X)))
    return float(np.max(np.abs(totals - (f_x - f_0))))


# ---------------------------------------------------------------------------
# rank statistics
# ---------------------------------------------------------------------------


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v), dtype=np.float64)
    sv = v[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # ties share the mean rank
        i = j + 1
    return ranks


def spearman(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Spearman rank correlation with a two-sided t-approximation p-value.

    Returns (nan, nan) when either input is constant or shorter than 3;
    rank correlation is undefined there.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise AnalysisError("inputs must have equal length")
    n = len(a)
    if n < 3 or np.all(a == a[0]) or np.all(b == b[0]):
        return float("nan"), float("nan")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    rho = float((ra * rb).sum() / denom)
    rho = max(-1.0, min(1.0, rho))
    if n == 3 or abs(rho) == 1.0:
        return rho, 0.0 if abs(rho) == 1.0 else 1.0
    t = rho * np.sqrt((n - 2) / (1.0 - rho * rho))
    p = 2.0 * float(special.stdtr(n - 2, -abs(t)))
    return rho, p


def ks_two_sample(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic with the asymptotic p-value.

    The p-value uses the Kolmogorov series with the standard small-sample
    correction to the effective sample size.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise AnalysisError("both samples must be nonempty")
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / n
    fb = np.searchsorted(b, pooled, side="right") / m
    d = float(np.max(np.abs(fa - fb)))
    en = np.sqrt(n * m / (n + m))
    arg = (en + 0.12 + 0.11 / en) * d
    if arg <= 0:
        return d, 1.0
    k = np.arange(1, 101)
    p = 2.0 * float(np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * (k * arg) ** 2)))
    return d, float(min(1.0, max(0.0, p)))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def build_report(result, config, feature_names: list[str],
                 channel_names: list[str] | None = None) -> dict:
    """Assemble the per-feature score report emitted by the pipeline.

    Carries the per-feature score mean/std over the selected restarts, the
    correlation profile, per-channel detail for channel-gated transforms,
    and an echo of the training configuration.
    """
    mean = np.asarray(result.mean)
    report = {
        "schema": "mindkit.report/1",
        "score_kind": result.score_kind,
        "lambda": result.lam,
        "features": list(feature_names),
        "score_mean": jsonsafe(result.feature_scores()),
        "score_std": jsonsafe(result.feature_spread()),
        "correlation_mean": jsonsafe(result.rho_mean),
        "correlation_std": jsonsafe(result.rho_std),
        "restarts": {
            "selected": list(result.selected),
            "failed": list(result.failed),
            "runs": [
                {"restart": d.restart, "val_loss": jsonsafe(d.val_loss),
                 "w1": jsonsafe(d.w1_mean), "cosine": jsonsafe(d.cosine_mean),
                 "epochs": d.epochs, "stop_reason": d.stop_reason}
                for d in result.diagnostics
            ],
        },
        "config": jsonsafe(asdict(config)),
    }
    if mean.ndim == 2:
        names = channel_names or [f"channel{k}" for k in range(mean.shape[1])]
        report["channels"] = {
            "names": list(names),
            "score_mean": jsonsafe(mean),
            "score_std": jsonsafe(result.std),
        }
    return report


# ---------------------------------------------------------------------------
# sanity check against damaged models
# ---------------------------------------------------------------------------


@dataclass
class SanityOutcome:
    layer: str
    rhos: list[float]
    pvalues: list[float]
    failures: int

    @property
    def rho_mean(self) -> float:
        return float(np.mean(self.rhos)) if self.rhos else float("nan")

    @property
    def rho_std(self) -> float:
        return float(np.std(self.rhos)) if self.rhos else float("nan")


SANITY_RESTARTS = 3  # per shuffled instance, to bound the check's runtime


def sanity_check(model: Model, tspec, dataset: Dataset, config,
                 reference_scores: np.ndarray, *, shuffles: int = 5,
                 seed: int = 0, threads: int = 1) -> list[SanityOutcome]:
    """Destroy one layer at a time and re-fit gates against the damaged
    model; scores that track a real model should decorrelate.

    For each layer, `shuffles` independently permuted copies are fitted
    with a fixed budget of SANITY_RESTARTS restarts and compared to
    reference_scores by rank correlation. Fits that fail to converge are
    counted and excluded rather than aborting the check.
    """
    from . import mindtrain  # deferred: mindtrain imports this module

    config = replace(config, restarts=SANITY_RESTARTS,
                     top_k=min(config.top_k, SANITY_RESTARTS))
    reference = np.asarray(reference_scores, dtype=np.float64).ravel()
    outcomes = []
    for li, layer in enumerate(model.layer_names()):
        rhos: list[float] = []
        pvals: list[float] = []
        failures = 0
        for s in range(shuffles):
            rng = substream(seed, f"sanity.{layer}.shuffle{s}")
            damaged = shuffle_layer(model, li, rng)
            try:
                result = mindtrain.multi_restart(damaged, tspec, dataset,
                                                 config, threads=threads)
            except TrainingError:
                failures += 1
                continue
            rho, p = spearman(reference, result.feature_scores())
            rhos.append(rho)
            pvals.append(p)
        outcomes.append(SanityOutcome(layer=layer, rhos=rhos, pvalues=pvals,
                                      failures=failures))
    return outcomes


def restart_baseline(model: Model, tspec, dataset: Dataset, config,
                     reference_scores: np.ndarray, *, instances: int = 5,
                     seed: int = 0, threads: int = 1) -> SanityOutcome:
    """Restart-to-restart score stability on the intact model.

    This is the yardstick the shuffled-layer correlations are judged
    against: each instance refits with fresh training randomness and is
    compared to reference_scores exactly as sanity_check does.
    """
    from . import mindtrain  # deferred: mindtrain imports this module

    config = replace(config, restarts=SANITY_RESTARTS,
                     top_k=min(config.top_k, SANITY_RESTARTS))
    reference = np.asarray(reference_scores, dtype=np.float64).ravel()
    rhos: list[float] = []
    pvals: list[float] = []
    failures = 0
    for s in range(instances):
        inst_seed = int(substream(seed, f"baseline.instance{s}")
                        .integers(2 ** 31 - 1))
        cfg = replace(config, seed=inst_seed)
        try:
            result = mindtrain.multi_restart(model, tspec, dataset, cfg,
                                             threads=threads)
        except TrainingError:
            failures += 1
            continue
        rho, p = spearman(reference, result.feature_scores())
        rhos.append(rho)
        pvals.append(p)
    return SanityOutcome(layer="baseline", rhos=rhos, pvalues=pvals,
                         failures=failures)
