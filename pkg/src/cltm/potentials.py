"""Feed-forward node potentials for the latent tree CRF and the independent baseline.

The network maps a (standardised) feature vector to one potential per tree
node. Edge potentials are free parameters shared by all inputs. Training
minimises the marginal negative log-likelihood of the observed labels,

    -log P(y | x) = logZ(x) - logZ(x | y),

whose gradient in the node potentials is ``E[z | x, y] - E[z | x]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import LabeledDataset
from .latent_tree import LatentTree
from .tree_crf import UNSET, Potentials, log_partition, map_config, marginals

DEFAULT_WIDTHS = {1: (), 2: (256,), 3: (256, 128)}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 250
    learning_rate: float = 0.05
    lr_decay: float = 0.01
    epochs: int = 30
    dropout_rate: float = 0.5
    seed: int = 0
    edge_l2: float = 1e-4
    depth: int = 3
    hidden_widths: list[int] | None = None
    standardize: bool = True
    init: str = "glorot"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.depth not in (1, 2, 3):
            raise ValueError("depth must be 1, 2 or 3")
        if self.init not in ("glorot", "zero"):
            raise ValueError("init must be 'glorot' or 'zero'")
        if self.hidden_widths is not None:
            self.hidden_widths = [int(w) for w in self.hidden_widths]
            if len(self.hidden_widths) != self.depth - 1:
                raise ValueError("need depth - 1 hidden widths")

    def widths(self) -> tuple[int, ...]:
        if self.hidden_widths is not None:
            return tuple(self.hidden_widths)
        return DEFAULT_WIDTHS[self.depth]

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Mlp:
    """Affine layers with ReLU between them and a linear output layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout_rate: float = 0.0

    @classmethod
    def init(cls, dims, rng: np.random.Generator, dropout_rate=0.0, zero=False) -> "Mlp":
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            if zero:
                w = np.zeros((fan_in, fan_out))
            else:
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, dropout_rate)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def forward(self, x, rng: np.random.Generator | None = None):
        """Outputs and a cache for :meth:`backward`; ``rng`` switches on dropout."""
        h = np.atleast_2d(np.asarray(x, dtype=float))
        if h.shape[1] != self.weights[0].shape[0]:
            raise ValueError(f"input has {h.shape[1]} features, network expects {self.weights[0].shape[0]}")
        cache = []
        last = len(self.weights) - 1
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            if layer == last:
                cache.append((h, None, None))
                h = a
                break
            out = np.maximum(a, 0.0)
            mask = None
            if rng is not None and self.dropout_rate > 0:
                keep = 1.0 - self.dropout_rate
                mask = (rng.random(out.shape) < keep) / keep
                out = out * mask
            cache.append((h, a, mask))
            h = out
        return h, cache

    def backward(self, cache, grad_out):
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        g = grad_out
        for layer in range(len(self.weights) - 1, -1, -1):
            h_in, _, _ = cache[layer]
            grads_w[layer] = h_in.T @ g
            grads_b[layer] = g.sum(axis=0)
            if layer == 0:
                break
            g = g @ self.weights[layer].T
            _, a_prev, mask_prev = cache[layer - 1]
            if mask_prev is not None:
                g = g * mask_prev
            g = g * (a_prev > 0)
        return grads_w, grads_b

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.dropout_rate)

    def to_dict(self) -> dict:
        return {
            "dims": self.dims,
            "dropout_rate": self.dropout_rate,
            "layers": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mlp":
        weights = [np.array(layer["weight"], dtype=float).reshape(a, b)
                   for layer, a, b in zip(data["layers"], data["dims"][:-1], data["dims"][1:])]
        biases = [np.array(layer["bias"], dtype=float) for layer in data["layers"]]
        return cls(weights, biases, float(data.get("dropout_rate", 0.0)))


@dataclass
class _Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x, enabled=True) -> "_Standardizer":
        x = np.asarray(x, dtype=float)
        if not enabled:
            return cls(np.zeros(x.shape[1]), np.ones(x.shape[1]))
        scale = x.std(axis=0)
        scale[scale == 0] = 1.0
        return cls(x.mean(axis=0), scale)

    def __call__(self, x):
        return (np.atleast_2d(np.asarray(x, dtype=float)) - self.mean) / self.scale


@dataclass
class CltmModel:
    tree: LatentTree
    mlp: Mlp
    edge_potentials: np.ndarray
    standardizer: _Standardizer
    config: TrainConfig = field(default_factory=TrainConfig)

    def potentials(self, x, rng=None):
        phi, cache = self.mlp.forward(self.standardizer(x), rng)
        return Potentials(phi, self.edge_potentials), cache

    def marginals(self, x):
        pot, _ = self.potentials(x)
        return marginals(self.tree, pot)

    def map(self, x):
        pot, _ = self.potentials(x)
        return map_config(self.tree, pot)

    def clamp(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=np.int64))
        if y.shape[1] != self.tree.observed_count:
            raise ValueError(f"expected {self.tree.observed_count} labels, got {y.shape[1]}")
        hidden = np.full((y.shape[0], self.tree.latent_count), UNSET, dtype=np.int64)
        return np.hstack([y, hidden])

    def to_dict(self) -> dict:
        return {
            "kind": "cltm",
            "tree": self.tree.to_dict(),
            "network": self.mlp.to_dict(),
            "edge_potentials": [
                {"edge": [a, b], "value": float(v)}
                for (a, b), v in zip(self.tree.edge_names(), self.edge_potentials)
            ],
            "feature_mean": self.standardizer.mean.tolist(),
            "feature_scale": self.standardizer.scale.tolist(),
            "config": asdict(self.config),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CltmModel":
        if data.get("kind") != "cltm":
            raise ValueError("not a CLTM model file")
        tree = LatentTree.from_dict(data["tree"])
        tree.validate()
        by_name = {tuple(sorted(e["edge"])): float(e["value"]) for e in data["edge_potentials"]}
        try:
            edge = np.array([by_name[tuple(sorted(pair))] for pair in tree.edge_names()])
        except KeyError as exc:
            raise ValueError(f"missing potential for edge {exc.args[0]}") from None
        if len(by_name) != len(tree.edges):
            raise ValueError("edge potentials do not match the tree edges")
        mlp = Mlp.from_dict(data["network"])
        if mlp.dims[-1] != tree.n_nodes:
            raise ValueError("network output width does not match the tree size")
        std = _Standardizer(np.array(data["feature_mean"], dtype=float), np.array(data["feature_scale"], dtype=float))
        return cls(tree, mlp, edge, std, TrainConfig.from_dict(data.get("config", {})))


@dataclass
class BaselineModel:
    """Independent per-label sigmoid classifier on the same network trunk."""

    label_names: list[str]
    mlp: Mlp
    standardizer: _Standardizer
    config: TrainConfig = field(default_factory=TrainConfig)

    def logits(self, x, rng=None):
        return self.mlp.forward(self.standardizer(x), rng)

    def predict_proba(self, x) -> np.ndarray:
        logits, _ = self.logits(x)
        return _sigmoid(logits)

    def predict(self, x, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(x) >= threshold).astype(np.int64)

    def nll(self, x, y) -> np.ndarray:
        logits, _ = self.logits(x)
        return _bce(logits, np.atleast_2d(y)).sum(axis=1)

    def to_dict(self) -> dict:
        return {
            "kind": "baseline",
            "labels": list(self.label_names),
            "network": self.mlp.to_dict(),
            "feature_mean": self.standardizer.mean.tolist(),
            "feature_scale": self.standardizer.scale.tolist(),
            "config": asdict(self.config),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BaselineModel":
        if data.get("kind") != "baseline":
            raise ValueError("not a baseline model file")
        std = _Standardizer(np.array(data["feature_mean"], dtype=float), np.array(data["feature_scale"], dtype=float))
        return cls(list(data["labels"]), Mlp.from_dict(data["network"]), std,
                   TrainConfig.from_dict(data.get("config", {})))


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _bce(logits, y):
    # -log sigmoid(a) for y=1, -log(1 - sigmoid(a)) for y=0
    return np.logaddexp(0.0, logits) - y * logits


def save_model(model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=1)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        data = json.load(fh)
    if data.get("kind") == "cltm":
        return CltmModel.from_dict(data)
    if data.get("kind") == "baseline":
        return BaselineModel.from_dict(data)
    raise ValueError(f"{path}: unknown model kind {data.get('kind')!r}")


def mlp_forward(params: Mlp, x, mode: str = "eval", rng: np.random.Generator | None = None):
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if mode == "train" and rng is None:
        rng = np.random.default_rng(0)
    return params.forward(x, rng if mode == "train" else None)


def init_cltm(tree: LatentTree, features, config: TrainConfig, rng=None) -> CltmModel:
    rng = np.random.default_rng(config.seed) if rng is None else rng
    x = np.atleast_2d(np.asarray(features, dtype=float))
    dims = [x.shape[1], *config.widths(), tree.n_nodes]
    mlp = Mlp.init(dims, rng, config.dropout_rate, zero=config.init == "zero")
    return CltmModel(tree, mlp, np.zeros(len(tree.edges)), _Standardizer.fit(x, config.standardize), config)


def marginal_nll_loss(model: CltmModel, x, y):
    """Per-sample ``-log P(y | x)`` with latent nodes summed out (eval mode, no dropout)."""
    pot, _ = model.potentials(x)
    clamp = model.clamp(y)
    nll = log_partition(model.tree, pot) - log_partition(model.tree, pot, clamp)
    nll = np.asarray(nll)
    return float(nll[0]) if np.ndim(x) == 1 else nll


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    edge: np.ndarray

    def flat(self) -> np.ndarray:
        parts = [w.ravel() for w in self.weights] + [b.ravel() for b in self.biases] + [self.edge]
        return np.concatenate(parts)


def potential_gradients(tree: LatentTree, pot: Potentials, clamp):
    """Per-sample ``-log P(y|x)`` and its derivatives in node and edge potentials."""
    free = marginals(tree, pot)
    clamped = marginals(tree, pot, clamp)
    loss = free.log_partition - clamped.log_partition
    d_node = clamped.node_marginals - free.node_marginals
    d_edge = clamped.edge_marginals[..., 1, 1] - free.edge_marginals[..., 1, 1]
    return loss, d_node, d_edge


def loss_gradient(model: CltmModel, x, y, rng: np.random.Generator | None = None,
                  edge_l2: float | None = None):
    """Mean batch objective and its gradient for every network weight and edge potential.

    The objective is the mean marginal NLL plus ``edge_l2 / 2 * |edge|^2``.
    Passing ``rng`` enables dropout; the same masks are used in the backward pass.
    """
    edge_l2 = model.config.edge_l2 if edge_l2 is None else edge_l2
    x = np.atleast_2d(x)
    pot, cache = model.potentials(x, rng)
    loss, d_node, d_edge = potential_gradients(model.tree, pot, model.clamp(y))
    batch = x.shape[0]
    grads_w, grads_b = model.mlp.backward(cache, d_node / batch)
    edge = model.edge_potentials
    g_edge = d_edge.mean(axis=0) + edge_l2 * edge
    objective = float(loss.mean() + 0.5 * edge_l2 * edge @ edge)
    return objective, Gradients(grads_w, grads_b, g_edge)


def _select_labels(dataset: LabeledDataset, names) -> np.ndarray:
    index = {n: i for i, n in enumerate(dataset.label_names)}
    missing = [n for n in names if n not in index]
    if missing:
        raise ValueError(f"dataset lacks labels required by the tree: {missing}")
    return dataset.labels[:, [index[n] for n in names]]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_finite(value, epoch):
    if not math.isfinite(value):
        raise TrainingError(f"loss became non-finite in epoch {epoch}")


def sgd_train(dataset: LabeledDataset, tree: LatentTree, config: TrainConfig | None = None,
              model: CltmModel | None = None):
    """Mini-batch SGD on the marginal NLL; returns ``(model, per-epoch mean loss)``."""
    config = config or TrainConfig()
    rng = np.random.default_rng(config.seed)
    y = _select_labels(dataset, tree.observed)
    x = dataset.features
    if model is None:
        model = init_cltm(tree, x, config, rng)
    trace = []
    for epoch in range(config.epochs):
        lr = config.learning_rate / (1.0 + config.lr_decay * epoch)
        total = 0.0
        for idx in _batches(len(x), config.batch_size, rng):
            loss, grads = loss_gradient(model, x[idx], y[idx], rng)
            _check_finite(loss, epoch)
            total += loss * len(idx)
            for w, g in zip(model.mlp.weights, grads.weights):
                w -= lr * g
            for b, g in zip(model.mlp.biases, grads.biases):
                b -= lr * g
            model.edge_potentials -= lr * grads.edge
        trace.append(total / len(x))
    return model, trace


def independent_baseline_train(dataset: LabeledDataset, config: TrainConfig | None = None,
                               labels=None):
    """Same trunk with one sigmoid output per label, trained by summed cross-entropy."""
    config = config or TrainConfig()
    rng = np.random.default_rng(config.seed)
    names = list(labels) if labels is not None else list(dataset.label_names)
    y = _select_labels(dataset, names).astype(float)
    x = dataset.features
    dims = [x.shape[1], *config.widths(), len(names)]
    mlp = Mlp.init(dims, rng, config.dropout_rate, zero=config.init == "zero")
    model = BaselineModel(names, mlp, _Standardizer.fit(x, config.standardize), config)
    trace = []
    for epoch in range(config.epochs):
        lr = config.learning_rate / (1.0 + config.lr_decay * epoch)
        total = 0.0
        for idx in _batches(len(x), config.batch_size, rng):
            logits, cache = model.logits(x[idx], rng)
            loss = float(_bce(logits, y[idx]).sum(axis=1).mean())
            _check_finite(loss, epoch)
            total += loss * len(idx)
            grads_w, grads_b = mlp.backward(cache, (_sigmoid(logits) - y[idx]) / len(idx))
            for w, g in zip(mlp.weights, grads_w):
                w -= lr * g
            for b, g in zip(mlp.biases, grads_b):
                b -= lr * g
        trace.append(total / len(x))
    return model, trace
