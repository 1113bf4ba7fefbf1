"""Multi-label metrics and unsupervised scene clustering."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

log = logging.getLogger(__name__)

DEFAULT_GRID = np.linspace(0.0, 1.0, 101)


def f_measure(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _rate(num, den):
    return float(num) / float(den) if den else 0.0


@dataclass
class MetricsReport:
    label_names: list[str]
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f: np.ndarray
    micro_precision: float
    micro_recall: float
    micro_f: float
    macro_precision: float
    macro_recall: float
    macro_f: float
    undefined_recall: list[str]

    def to_dict(self) -> dict:
        per_label = {
            name: {
                "tp": int(self.tp[j]),
                "fp": int(self.fp[j]),
                "fn": int(self.fn[j]),
                "precision": float(self.precision[j]),
                "recall": float(self.recall[j]),
                "f": float(self.f[j]),
            }
            for j, name in enumerate(self.label_names)
        }
        return {
            "micro": {"precision": self.micro_precision, "recall": self.micro_recall, "f": self.micro_f},
            "macro": {"precision": self.macro_precision, "recall": self.macro_recall, "f": self.macro_f},
            "per_label": per_label,
            "undefined_recall": list(self.undefined_recall),
        }


def prf(pred, truth, label_names=None) -> MetricsReport:
    """Per-label and pooled precision/recall/F from binary decision matrices.

    Labels with no positives in ``truth`` get recall 0 and are listed in
    ``undefined_recall``.
    """
    pred = np.atleast_2d(np.asarray(pred)).astype(bool)
    truth = np.atleast_2d(np.asarray(truth)).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    names = list(label_names) if label_names is not None else [f"y{j}" for j in range(pred.shape[1])]
    tp = np.sum(pred & truth, axis=0)
    fp = np.sum(pred & ~truth, axis=0)
    fn = np.sum(~pred & truth, axis=0)
    precision = np.array([_rate(a, a + b) for a, b in zip(tp, fp)])
    recall = np.array([_rate(a, a + b) for a, b in zip(tp, fn)])
    f = np.array([f_measure(p, r) for p, r in zip(precision, recall)])
    undefined = [names[j] for j in np.flatnonzero(tp + fn == 0)]
    mp = _rate(tp.sum(), tp.sum() + fp.sum())
    mr = _rate(tp.sum(), tp.sum() + fn.sum())
    return MetricsReport(
        names, tp, fp, fn, precision, recall, f,
        mp, mr, f_measure(mp, mr),
        float(precision.mean()), float(recall.mean()), float(f.mean()),
        undefined,
    )


@dataclass
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray  # (T, L)
    recall: np.ndarray  # (T, L)
    micro_precision: np.ndarray  # (T,)
    micro_recall: np.ndarray  # (T,)
    label_names: list[str]

    def rows(self):
        for t, thr in enumerate(self.thresholds):
            for j, name in enumerate(self.label_names):
                yield name, float(thr), float(self.precision[t, j]), float(self.recall[t, j])
            yield "micro", float(thr), float(self.micro_precision[t]), float(self.micro_recall[t])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["label", "threshold", "precision", "recall"])
            for name, thr, p, r in self.rows():
                writer.writerow([name, repr(thr), repr(p), repr(r)])


def pr_curve(scores, truth, grid=DEFAULT_GRID, label_names=None) -> PrCurve:
    """Precision/recall per label and pooled, deciding positive when ``score >= threshold``."""
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    truth = np.atleast_2d(np.asarray(truth))
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0) or grid.min() < 0 or grid.max() > 1:
        raise ValueError("threshold grid must be strictly increasing within [0, 1]")
    names = list(label_names) if label_names is not None else [f"y{j}" for j in range(scores.shape[1])]
    precision = np.zeros((len(grid), scores.shape[1]))
    recall = np.zeros_like(precision)
    micro_p = np.zeros(len(grid))
    micro_r = np.zeros(len(grid))
    for t, thr in enumerate(grid):
        report = prf(scores >= thr, truth, names)
        precision[t] = report.precision
        recall[t] = report.recall
        micro_p[t] = report.micro_precision
        micro_r[t] = report.micro_recall
    return PrCurve(grid, precision, recall, micro_p, micro_r, names)


def _inertia(x, centers, assign):
    return float(np.sum((x - centers[assign]) ** 2))


def _assign(x, centers):
    d = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    return np.argmin(d, axis=1), d


def _seed_centers(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(x, centers, max_iter, history=None):
    assign, d = _assign(x, centers)
    for _ in range(max_iter):
        new_centers = centers.copy()
        for c in range(len(centers)):
            members = assign == c
            if members.any():
                new_centers[c] = x[members].mean(axis=0)
            else:
                # empty cluster: reseed at the point farthest from its center
                far = int(np.argmax(d[np.arange(len(x)), assign]))
                new_centers[c] = x[far]
                assign[far] = c
        centers = new_centers
        if history is not None:
            history.append(_inertia(x, centers, assign))
        new_assign, d = _assign(x, centers)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        if history is not None:
            history.append(_inertia(x, centers, assign))
    return assign, centers


def kmeans(vectors, k: int, restarts: int = 20, seed: int = 0, max_iter: int = 300,
           history: list | None = None):
    """k-means++ seeding and Lloyd iterations; best of ``restarts`` by inertia.

    Returns ``(assignment, inertia)``. Restart ``r`` uses a generator seeded
    from ``(seed, r)`` so results do not depend on execution order.
    """
    x = np.atleast_2d(np.asarray(vectors, dtype=float))
    if not 1 <= k <= x.shape[0]:
        raise ValueError("need 1 <= k <= number of vectors")
    best = None
    for r in range(max(restarts, 1)):
        rng = np.random.default_rng([seed, r])
        centers = _seed_centers(x, k, rng)
        assign, centers = _lloyd(x, centers, max_iter, history if r == 0 else None)
        inertia = _inertia(x, centers, assign)
        if best is None or inertia < best[1]:
            best = (assign, inertia)
    return best


@dataclass
class ClusterEval:
    assignment: np.ndarray
    matching: dict[int, int]  # cluster -> scene
    contingency: np.ndarray  # clusters x scenes
    matched: int
    misclassification: float

    def to_dict(self) -> dict:
        return {
            "misclassification": self.misclassification,
            "matched": self.matched,
            "total": int(self.contingency.sum()),
            "matching": {str(c): int(s) for c, s in sorted(self.matching.items())},
            "contingency": self.contingency.tolist(),
        }


def contingency_table(assignment, scenes, k: int, n_scenes: int | None = None) -> np.ndarray:
    assignment = np.asarray(assignment, dtype=int)
    scenes = np.asarray(scenes, dtype=int)
    n_scenes = int(scenes.max()) + 1 if n_scenes is None else n_scenes
    table = np.zeros((k, n_scenes), dtype=np.int64)
    np.add.at(table, (assignment, scenes), 1)
    return table


def match_table(table) -> tuple[dict[int, int], int]:
    """Maximum-weight one-to-one matching of rows (clusters) to columns (scenes)."""
    table = np.asarray(table)
    rows, cols = linear_sum_assignment(table, maximize=True)
    matching = {int(r): int(c) for r, c in zip(rows, cols)}
    return matching, int(table[rows, cols].sum())


def match_clusters(assignment, scenes, k: int) -> ClusterEval:
    table = contingency_table(assignment, scenes, k)
    matching, matched = match_table(table)
    total = int(table.sum())
    return ClusterEval(np.asarray(assignment), matching, table, matched, 1.0 - matched / total)


SCENE_SOURCES = ("hidden", "observed+hidden", "baseline-probs")


def scene_feature_vectors(model, features, source: str = "hidden") -> np.ndarray:
    """Per-sample vectors used for scene clustering.

    ``hidden`` and ``observed+hidden`` are unclamped CLTM node marginals;
    ``baseline-probs`` are the independent classifier's label probabilities.
    """
    from .potentials import BaselineModel, CltmModel

    if source == "baseline-probs":
        if not isinstance(model, BaselineModel):
            raise ValueError("baseline-probs needs an independent baseline model")
        return model.predict_proba(features)
    if source not in SCENE_SOURCES:
        raise ValueError(f"unknown source {source!r}; expected one of {SCENE_SOURCES}")
    if not isinstance(model, CltmModel):
        raise ValueError(f"source {source!r} needs a CLTM model")
    node = model.marginals(features).node_marginals
    if source == "hidden":
        return node[:, model.tree.observed_count:]
    return node
