"""Desk-scale differentiable predictors and their training loops.

Three architectures: a homogeneous linear map (no bias), a ReLU MLP, and a
dilated temporal CNN (conv -> normalize -> GeLU blocks, mean-pooled over
time into a dense head). Each conv block normalizes across channels at
every timestep, never over time, so level statistics such as a series'
running mean survive to the head. Classifiers emit a Bernoulli probability
through a
sigmoid; regressors emit a point value; "gaussian" marks a fixed-variance
Gaussian head that behaves like regression everywhere except in how
downstream code interprets the output distribution.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .data import Dataset, substream
from .errors import GraphError, TrainingError
from .optim import Adam, PlateauSchedule

ARCHITECTURES = ("linear", "mlp", "seqconv")
OUTPUT_KINDS = ("probability", "regression", "gaussian")

SEQCONV_HIDDEN = (16, 16, 8)
SEQCONV_DILATIONS = (1, 2, 2)


@dataclass
class Model:
    kind: str
    output: str
    input_dim: int
    seq_len: int | None
    params: dict[str, np.ndarray]
    hidden: tuple = ()
    dilations: tuple = ()
    kernel_size: int = 3
    seed: int | None = None

    def copy(self) -> "Model":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def layer_names(self) -> list[str]:
        """Weight tensors eligible for layer shuffling, input to output."""
        if self.kind == "linear":
            return ["w"]
        if self.kind == "mlp":
            return [f"w{i}" for i in range(len(self.hidden) + 1)]
        return [f"conv{i}_w" for i in range(len(self.hidden))] + ["head_w"]


@dataclass
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 32
    patience: int = 10
    min_delta: float = 1e-4
    lr_floor: float = 5e-6
    max_epochs: int = 200
    adversarial: bool = False
    pgd_eps: float = 0.1
    pgd_step: float | None = None
    pgd_iters: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise TrainingError("lr, batch_size, and max_epochs must be positive")
        if self.pgd_eps < 0 or self.pgd_iters < 1:
            raise TrainingError("pgd_eps must be >= 0 and pgd_iters >= 1")


def build_model(kind: str, input_dim: int, *, seq_len: int | None = None,
                hidden: tuple = (), output: str | None = None,
                kernel_size: int = 3, seed: int = 0) -> Model:
    """Initialize an architecture with seed-reproducible parameters."""
    if kind not in ARCHITECTURES:
        raise GraphError(f"unknown architecture {kind!r}")
    if output is None:
        output = "regression" if kind == "linear" else "probability"
    if output not in OUTPUT_KINDS:
        raise GraphError(f"unknown output kind {output!r}")
    rng = substream(seed, f"model-init.{kind}")
    params: dict[str, np.ndarray] = {}
    if kind == "linear":
        params["w"] = rng.normal(0.0, 1.0 / np.sqrt(input_dim), (input_dim, 1))
        return Model(kind, output, input_dim, None, params, seed=seed)
    if kind == "mlp":
        hidden = tuple(hidden) or (16,)
        widths = (input_dim,) + hidden + (1,)
        for i in range(len(widths) - 1):
            fan_in = widths[i]
            params[f"w{i}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                         (widths[i], widths[i + 1]))
            params[f"b{i}"] = np.zeros(widths[i + 1])
        return Model(kind, output, input_dim, None, params, hidden=hidden, seed=seed)
    if seq_len is None:
        raise GraphError("seqconv requires seq_len")
    hidden = tuple(hidden) or SEQCONV_HIDDEN
    dilations = SEQCONV_DILATIONS[:len(hidden)] if len(hidden) <= 3 \
        else tuple([1] + [2] * (len(hidden) - 1))
    cin = input_dim
    for i, cout in enumerate(hidden):
        fan_in = cin * kernel_size
        params[f"conv{i}_w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                          (cout, cin, kernel_size))
        params[f"conv{i}_b"] = np.zeros(cout)
        cin = cout
    params["head_w"] = rng.normal(0.0, np.sqrt(1.0 / cin), (cin, 1))
    params["head_b"] = np.zeros(1)
    return Model(kind, output, input_dim, seq_len, params, hidden=hidden,
                 dilations=dilations, kernel_size=kernel_size, seed=seed)


# ---------------------------------------------------------------------------
# forward graphs
# ---------------------------------------------------------------------------


def param_nodes(model: Model, trainable: bool) -> dict[str, dc.Node]:
    """Leaves when the model is being fit, constants when it is frozen."""
    if trainable:
        return {k: dc.leaf(k, v.shape) for k, v in model.params.items()}
    return {k: dc.constant(v) for k, v in model.params.items()}


def forward_graph(model: Model, x: dc.Node, params: dict[str, dc.Node],
                  *, logits: bool = False) -> dc.Node:
    """Model output node for a batched input leaf; (B, d) or (B, d, T)."""
    B = x.shape[0]
    if model.kind == "linear":
        out = dc.reshape(dc.matmul(x, params["w"]), (B,))
    elif model.kind == "mlp":
        h = x
        n_layers = len(model.hidden) + 1
        for i in range(n_layers):
            h = dc.add(dc.matmul(h, params[f"w{i}"]), params[f"b{i}"])
            if i < n_layers - 1:
                h = dc.relu(h)
        out = dc.reshape(h, (B,))
    else:
        h = x
        for i, dil in enumerate(model.dilations):
            pad = dil * (model.kernel_size - 1) // 2
            h = dc.conv1d(h, params[f"conv{i}_w"], padding=pad, dilation=dil)
            h = dc.add(h, dc.reshape(params[f"conv{i}_b"], (model.hidden[i], 1)))
            h = dc.gelu(dc.normalize(h, axis=1))
        pooled = dc.mean(h, axis=2)
        out = dc.reshape(dc.add(dc.matmul(pooled, params["head_w"]),
                                params["head_b"]), (B,))
    if model.output == "probability" and not logits:
        out = dc.sigmoid(out)
    return out


def _as_batch(model: Model, X: np.ndarray) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    expected = 2 if model.seq_len is None else 3
    if X.ndim == expected - 1:
        return X[None], True
    if X.ndim != expected:
        raise GraphError(f"{model.kind} expects {expected - 1}-D instances")
    return X, False


def predict(model: Model, X: np.ndarray) -> np.ndarray | float:
    """Model output for one instance (scalar) or a batch (vector)."""
    Xb, single = _as_batch(model, X)
    x = dc.leaf("x", Xb.shape)
    out = forward_graph(model, x, param_nodes(model, trainable=False))
    val = dc.Graph(out).evaluate({"x": Xb})
    return float(val[0]) if single else val


def prediction_graph(model: Model, batch_shape: tuple) -> dc.Graph:
    """Reusable frozen-parameter forward graph with input leaf "x"."""
    x = dc.leaf("x", batch_shape)
    return dc.Graph(forward_graph(model, x, param_nodes(model, trainable=False)))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _loss_graph(model: Model, batch_shape: tuple) -> dc.Graph:
    x = dc.leaf("x", batch_shape)
    y = dc.leaf("y", (batch_shape[0],))
    params = {k: dc.leaf(k, v.shape) for k, v in model.params.items()}
    if model.output == "probability":
        logits = forward_graph(model, x, params, logits=True)
        loss = dc.mean(dc.bce_with_logits(logits, y))
    else:
        pred = forward_graph(model, x, params)
        err = dc.sub(pred, y)
        loss = dc.mean(dc.mul(err, err))
    return dc.Graph(loss)


def _pgd_perturb(graph: dc.Graph, binds: dict, Xb: np.ndarray,
                 eps: float, step: float, iters: int) -> np.ndarray:
    """Ascent on the batch loss inside an L-inf ball around the clean batch.

    The perturbation is re-projected onto the ball after every iteration.
    """
    delta = np.zeros_like(Xb)
    for _ in range(iters):
        binds["x"] = Xb + delta
        gx = graph.gradient(binds, wrt=("x",))["x"]
        delta = np.clip(delta + step * np.sign(gx), -eps, eps)
    return Xb + delta


def train(model: Model, dataset: Dataset,
          config: TrainConfig) -> tuple[Model, dict]:
    """Fit with adaptive moments and the plateau schedule; keep the epoch
    whose validation loss was best. Returns (fitted model, history)."""
    Xtr, ytr = dataset.split("train")
    Xva, yva = dataset.split("validation")
    fitted = model.copy()
    params = fitted.params
    opt = Adam(params, lr=config.lr)
    sched = PlateauSchedule(config.patience, config.min_delta, config.lr_floor)
    rng = substream(config.seed, "model-train.shuffle")
    graphs: dict[int, dc.Graph] = {}

    def graph_for(b: int) -> dc.Graph:
        if b not in graphs:
            shape = (b,) + Xtr.shape[1:]
            graphs[b] = _loss_graph(fitted, shape)
        return graphs[b]

    eps = config.pgd_eps if config.adversarial else 0.0
    step = config.pgd_step if config.pgd_step is not None else eps / 4.0
    names = list(params)
    history = {"train_loss": [], "val_loss": [], "lr": []}
    best_loss, best_params = np.inf, None

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(Xtr))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            Xb, yb = Xtr[idx], ytr[idx]
            g = graph_for(len(idx))
            binds = {**params, "y": yb}
            if eps > 0:
                Xb = _pgd_perturb(g, dict(binds), Xb, eps, step,
                                  config.pgd_iters)
            binds["x"] = Xb
            loss, grads = g.value_and_grad(binds, wrt=names)
            loss = float(loss)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite training loss at epoch {epoch} "
                    f"(lr={opt.lr:g}); inspect data scaling or lower lr")
            opt.step(grads)
            total += loss * len(idx)
            count += len(idx)
        vg = graph_for(len(Xva))
        val_loss = float(vg.evaluate({**params, "x": Xva, "y": yva}))
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history["train_loss"].append(total / count)
        history["val_loss"].append(val_loss)
        history["lr"].append(opt.lr)
        if val_loss < best_loss:
            best_loss = val_loss
            best_params = {k: v.copy() for k, v in params.items()}
        if not sched.update(val_loss, opt):
            break
    if best_params is not None:
        fitted.params = best_params
    return fitted, history


def train_adversarial(model: Model, dataset: Dataset,
                      config: TrainConfig) -> tuple[Model, dict]:
    """PGD-robust variant of train(); eps = 0 reduces to it exactly."""
    return train(model, dataset, replace(config, adversarial=True))


def shuffle_layer(model: Model, layer_index: int,
                  rng: np.random.Generator) -> Model:
    """Copy of the model with one layer's weight entries permuted.

    The permutation preserves the weight multiset; the input model is left
    untouched.
    """
    layers = model.layer_names()
    if not 0 <= layer_index < len(layers):
        raise GraphError(f"layer index {layer_index} out of range "
                         f"(model has {len(layers)} layers)")
    name = layers[layer_index]
    shuffled = model.copy()
    w = shuffled.params[name]
    shuffled.params[name] = rng.permutation(w.ravel()).reshape(w.shape)
    return shuffled


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_model(model: Model, path) -> None:
    doc = {
        "schema": "mindkit.model/1",
        "kind": model.kind,
        "output": model.output,
        "input_dim": model.input_dim,
        "seq_len": model.seq_len,
        "hidden": list(model.hidden),
        "dilations": list(model.dilations),
        "kernel_size": model.kernel_size,
        "seed": model.seed,
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                   for k, v in model.params.items()},
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_model(path) -> Model:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise GraphError(f"cannot read model checkpoint {path}: {exc}") from exc
    if doc.get("schema") != "mindkit.model/1":
        raise GraphError(f"not a model checkpoint: {path}")
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in doc["params"].items()}
    return Model(doc["kind"], doc["output"], doc["input_dim"], doc["seq_len"],
                 params, hidden=tuple(doc["hidden"]),
                 dilations=tuple(doc["dilations"]),
                 kernel_size=doc["kernel_size"], seed=doc["seed"])
