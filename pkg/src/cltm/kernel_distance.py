"""Conditional information distances between labels via kernel conditional embeddings.

For each query point ``x_i`` the conditional second moment of a label pair,
``E[psi(y_k) psi(y_t)^T | x_i]``, is estimated by kernel ridge regression of the
2x2 indicator outer products on the features. The per-query distance

    d_kt(i) = -log( |det J_kt| / sqrt(|det J_kk| |det J_tt|) )

is averaged over queries. ``psi`` is the indicator encoding ``psi(0) = (1, 0)``,
``psi(1) = (0, 1)``, so ``J_kk`` is ``diag(P(y_k = 0), P(y_k = 1))``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .data import LabeledDataset, read_matrix_csv, write_matrix_csv

log = logging.getLogger(__name__)

DET_FLOOR = 1e-12
CLAMP_CEILING = 20.0
DEFAULT_LAMBDA = 1e-3
DEFAULT_QUERY_SUBSAMPLE = 1000
MEDIAN_PAIRS = 2000


class DegenerateMarginal(ArithmeticError):
    """A label is (conditionally) deterministic at a query, so its distance is undefined."""


class EstimationError(RuntimeError):
    pass


@dataclass
class DistanceMatrix:
    entries: np.ndarray
    labels: list[str]
    clamp_ceiling: float = CLAMP_CEILING

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def validate(self) -> None:
        d = self.entries
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError("distance matrix must be square")
        if not np.all(np.isfinite(d)):
            raise ValueError("distance matrix has non-finite entries")
        if not np.allclose(d, d.T, atol=0, rtol=0):
            raise ValueError("distance matrix is not symmetric")
        if np.any(np.diag(d) != 0):
            raise ValueError("distance matrix diagonal must be zero")


def _check_features(features) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError("features must be a non-empty n x d matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    return x


def _squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(sq, 0.0)


def rbf_gram(features, gamma: float) -> np.ndarray:
    """Gaussian kernel matrix ``exp(-gamma * |x_i - x_j|^2)``."""
    x = _check_features(features)
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    k = np.exp(-gamma * _squared_distances(x, x))
    k = 0.5 * (k + k.T)
    np.fill_diagonal(k, 1.0)
    return k


def median_bandwidth(features, max_pairs: int = MEDIAN_PAIRS, seed: int = 0) -> float:
    """Inverse median of nonzero pairwise squared distances.

    When there are more than ``max_pairs`` pairs, a seeded uniform sample of
    pairs is used instead of all of them.
    """
    x = _check_features(features)
    n = x.shape[0]
    if n < 2:
        raise ValueError("median bandwidth needs at least two points")
    n_pairs = n * (n - 1) // 2
    if n_pairs <= max_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, size=max_pairs)
        j = rng.integers(0, n - 1, size=max_pairs)
        j = j + (j >= i)
    sq = np.sum((x[i] - x[j]) ** 2, axis=1)
    sq = sq[sq > 0]
    if sq.size == 0:
        raise ValueError("degenerate feature set")
    return 1.0 / float(np.median(sq))


def _regulariser(n: int, lam: float, scale_by_n: bool) -> float:
    return lam * n if scale_by_n else lam


def _solve(gram: np.ndarray, mu: float, rhs: np.ndarray) -> np.ndarray:
    a = gram + mu * np.eye(gram.shape[0])
    try:
        factor = linalg.cho_factor(a, lower=True, check_finite=False)
        out = linalg.cho_solve(factor, rhs, check_finite=False)
    except linalg.LinAlgError:
        cond = np.linalg.cond(a)
        raise EstimationError(f"kernel system is not positive definite (condition ~{cond:.3g})") from None
    if not np.all(np.isfinite(out)):
        raise EstimationError(f"kernel solve produced non-finite weights (condition ~{np.linalg.cond(a):.3g})")
    return out


def kernel_regression_weights(gram, query_index, lam: float = DEFAULT_LAMBDA, scale_by_n: bool = True):
    """Weights ``G`` with ``(K + mu I) G = K[:, query]``, ``mu = lam * n`` by default.

    ``query_index`` may be a single index or an array of indices (one column
    per query).
    """
    gram = np.asarray(gram, dtype=float)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    mu = _regulariser(gram.shape[0], lam, scale_by_n)
    return _solve(gram, mu, gram[:, query_index])


def nystrom_weights(features, landmarks: int, gamma: float, lam: float, query, seed: int = 0,
                    scale_by_n: bool = True) -> np.ndarray:
    """Low-rank version of :func:`kernel_regression_weights` from ``landmarks`` sampled columns."""
    x = _check_features(features)
    n = x.shape[0]
    if landmarks < 1:
        raise ValueError("need at least one landmark")
    if landmarks > n:
        raise ValueError("more landmarks than samples")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=landmarks, replace=False))
    c = np.exp(-gamma * _squared_distances(x, x[idx]))
    w = c[idx]
    evals, evecs = np.linalg.eigh(0.5 * (w + w.T))
    keep = evals > 1e-12 * evals.max()
    feat = c @ (evecs[:, keep] / np.sqrt(evals[keep]))  # K ~= feat @ feat.T
    mu = _regulariser(n, lam, scale_by_n)
    inner = feat.T @ feat + mu * np.eye(feat.shape[1])
    return feat @ np.linalg.solve(inner, feat[query].T)


def _clean_tables(raw: np.ndarray) -> np.ndarray:
    """Clamp entries to [0, 1] and renormalise each trailing 2x2 table to sum 1."""
    t = np.clip(raw, 0.0, 1.0)
    total = t.sum(axis=(-2, -1), keepdims=True)
    if np.any(total <= 0):
        raise EstimationError("empty conditional estimate")
    return t / total


def conditional_joint(labels, k: int, t: int, weights) -> np.ndarray:
    """Estimated 2x2 table of ``(y_k, y_t)`` from regression weights over the samples."""
    y = np.asarray(labels)
    w = np.asarray(weights, dtype=float)
    if not np.any(w != 0):
        raise EstimationError("empty conditional estimate")
    yk = y[:, k].astype(float)
    yt = y[:, t].astype(float)
    raw = np.array(
        [
            [w @ ((1 - yk) * (1 - yt)), w @ ((1 - yk) * yt)],
            [w @ (yk * (1 - yt)), w @ (yk * yt)],
        ]
    )
    return _clean_tables(raw)


def _det2(table) -> float:
    t = np.asarray(table, dtype=float)
    return float(t[0, 0] * t[1, 1] - t[0, 1] * t[1, 0])


def pairwise_distance(joint, marg_k, marg_t, det_floor: float = DET_FLOOR,
                      clamp_ceiling: float = CLAMP_CEILING) -> float:
    """Information distance of a pair from its joint table and the two diagonal marginal tables."""
    sk = abs(_det2(marg_k))
    st = abs(_det2(marg_t))
    if sk < det_floor or st < det_floor:
        raise DegenerateMarginal("degenerate marginal")
    s = max(abs(_det2(joint)), det_floor)
    # clamped regression tables need not be mutually consistent, so the ratio can exceed 1
    return float(np.clip(-np.log(s / np.sqrt(sk * st)), 0.0, clamp_ceiling))


def _query_distances(y: np.ndarray, g: np.ndarray, det_floor: float, ceiling: float):
    """Per-query distance matrices for a block of weight columns ``g`` (n x q).

    Returns distances (q, L, L) and a validity mask (q, L, L); pairs touching a
    degenerate marginal are invalid.
    """
    yf = y.astype(float)
    nf = 1.0 - yf
    p11 = np.einsum("nq,nk,nt->qkt", g, yf, yf)
    p10 = np.einsum("nq,nk,nt->qkt", g, yf, nf)
    p00 = np.einsum("nq,nk,nt->qkt", g, nf, nf)
    p01 = np.swapaxes(p10, 1, 2)
    raw = np.stack([np.stack([p00, p01], -1), np.stack([p10, p11], -1)], -2)  # q,L,L,2,2
    t = np.clip(raw, 0.0, 1.0)
    total = t.sum(axis=(-2, -1), keepdims=True)
    if np.any(total <= 0):
        raise EstimationError("empty conditional estimate")
    t = t / total
    det = np.abs(t[..., 0, 0] * t[..., 1, 1] - t[..., 0, 1] * t[..., 1, 0])
    s_diag = np.diagonal(det, axis1=1, axis2=2)  # q, L
    ok = s_diag >= det_floor
    valid = ok[:, :, None] & ok[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        norm = np.sqrt(s_diag[:, :, None] * s_diag[:, None, :])
        dist = -np.log(np.maximum(det, det_floor) / norm)
    dist = np.where(valid, np.clip(dist, 0.0, ceiling), 0.0)
    return dist, valid


def cond_distance_matrix(
    dataset: LabeledDataset,
    gamma: float | None = None,
    lam: float = DEFAULT_LAMBDA,
    query_subsample: int | None = DEFAULT_QUERY_SUBSAMPLE,
    seed: int = 0,
    scale_by_n: bool = True,
    landmarks: int | None = None,
    det_floor: float = DET_FLOOR,
    clamp_ceiling: float = CLAMP_CEILING,
    chunk: int = 256,
) -> DistanceMatrix:
    """Average conditional information distance over (a subsample of) query points.

    Labels that are constant over the dataset are dropped with a warning; the
    returned matrix lists the kept label names.
    """
    x = _check_features(dataset.features)
    y = np.asarray(dataset.labels)
    freq = y.mean(axis=0)
    keep = np.flatnonzero((freq > 0) & (freq < 1))
    for j in np.flatnonzero(~((freq > 0) & (freq < 1))):
        log.warning("dropping constant label %s", dataset.label_names[j])
    if keep.size < 2:
        raise EstimationError("fewer than two non-constant labels")
    y = y[:, keep]
    names = [dataset.label_names[j] for j in keep]
    n = x.shape[0]
    if gamma is None:
        gamma = median_bandwidth(x, seed=seed)
    rng = np.random.default_rng(seed)
    if query_subsample is None or query_subsample >= n:
        queries = np.arange(n)
    else:
        queries = np.sort(rng.choice(n, size=query_subsample, replace=False))

    mu = _regulariser(n, lam, scale_by_n)
    if landmarks is None:
        gram = rbf_gram(x, gamma)
        factor = None
        try:
            factor = linalg.cho_factor(gram + mu * np.eye(n), lower=True, check_finite=False)
        except linalg.LinAlgError:
            cond = np.linalg.cond(gram + mu * np.eye(n))
            raise EstimationError(f"kernel system is not positive definite (condition ~{cond:.3g})") from None

        def weights(block):
            return linalg.cho_solve(factor, gram[:, block], check_finite=False)
    else:
        def weights(block):
            return nystrom_weights(x, landmarks, gamma, lam, block, seed=seed, scale_by_n=scale_by_n)

    n_labels = y.shape[1]
    total = np.zeros((n_labels, n_labels))
    count = np.zeros((n_labels, n_labels))
    for start in range(0, len(queries), chunk):
        block = queries[start:start + chunk]
        dist, valid = _query_distances(y, weights(block), det_floor, clamp_ceiling)
        total += dist.sum(axis=0)
        count += valid.sum(axis=0)
    bad = np.argwhere(count == 0)
    for k, t in bad:
        if k < t:
            raise EstimationError(f"every query is degenerate for pair ({names[k]}, {names[t]})")
    d = total / count
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(d, names, clamp_ceiling)


def empirical_distance_matrix(labels, names=None, det_floor: float = DET_FLOOR,
                              clamp_ceiling: float = CLAMP_CEILING) -> DistanceMatrix:
    """Unconditional distances from the empirical joint frequencies (uniform weights)."""
    y = np.asarray(labels)
    n, n_labels = y.shape
    g = np.full((n, 1), 1.0 / n)
    dist, valid = _query_distances(y, g, det_floor, clamp_ceiling)
    if not valid.all():
        raise DegenerateMarginal("degenerate marginal")
    names = names or [f"y{i}" for i in range(n_labels)]
    d = dist[0]
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(d, list(names), clamp_ceiling)


def save_distance_matrix(dm: DistanceMatrix, csv_path, sidecar_path) -> None:
    write_matrix_csv(csv_path, dm.entries)
    with open(sidecar_path, "w") as fh:
        json.dump({"labels": dm.labels, "clamp_ceiling": dm.clamp_ceiling}, fh, indent=2)
        fh.write("\n")


def load_distance_matrix(csv_path, sidecar_path) -> DistanceMatrix:
    rows = read_matrix_csv(csv_path)
    entries = np.array([[float(c) for c in r] for r in rows])
    with open(sidecar_path) as fh:
        meta = json.load(fh)
    if entries.shape != (len(meta["labels"]),) * 2:
        raise ValueError("distance matrix shape does not match its label sidecar")
    dm = DistanceMatrix(entries, list(meta["labels"]), float(meta.get("clamp_ceiling", CLAMP_CEILING)))
    dm.validate()
    return dm
