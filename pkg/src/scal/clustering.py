"""Spherical K-means seeded from source class centers.

Operates on plain numpy snapshots of features; nothing here takes part in a
gradient tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateVectorError, MissingClassError

_ZERO_NORM = 1e-12


@dataclass
class ClusterModel:
    centers: np.ndarray  # (K, d), unit rows
    assignments: np.ndarray  # (n,), ints in [0, K)
    objective_trace: list[float] = field(default_factory=list)
    iterations_run: int = 0
    repaired: int = 0  # number of empty/degenerate cluster resets

    @property
    def objective(self) -> float:
        return self.objective_trace[-1] if self.objective_trace else float("nan")


def _as_matrix(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def cosine_distance(a, b) -> float:
    """0.5 * (1 - cos(a, b)), in [0, 1]."""
    a = _as_matrix(a).ravel()
    b = _as_matrix(b).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= _ZERO_NORM or nb <= _ZERO_NORM:
        raise DegenerateVectorError("cosine distance of a zero-norm vector")
    cos = float(np.dot(a, b) / (na * nb))
    return 0.5 * (1.0 - min(1.0, max(-1.0, cos)))


def cosine_distance_matrix(x: np.ndarray, unit_centers: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms <= _ZERO_NORM):
        raise DegenerateVectorError(f"{int(np.sum(norms <= _ZERO_NORM))} zero-norm feature vector(s)")
    cos = (x / norms[:, None]) @ unit_centers.T
    return 0.5 * (1.0 - np.clip(cos, -1.0, 1.0))


def _normalize_rows(m: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1)
    bad = np.flatnonzero(norms <= _ZERO_NORM)
    if bad.size:
        raise DegenerateVectorError(f"{what}: zero-norm row(s) {bad.tolist()}")
    return m / norms[:, None]


def source_class_centers(features, labels, k: int) -> np.ndarray:
    """Per-class mean of source features, L2-normalized. Shape (k, d)."""
    x = _as_matrix(features)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (x.shape[0],):
        raise ContractError(f"{x.shape[0]} features but {labels.shape[0]} labels")
    counts = np.bincount(labels, minlength=k)[:k]
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise MissingClassError(missing.tolist())
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    return _normalize_rows(sums / counts[:, None], "source class centers")


def clustering_objective(x: np.ndarray, unit_centers: np.ndarray, assignments: np.ndarray) -> float:
    """Sum over samples of the cosine distance to the assigned center."""
    d = cosine_distance_matrix(x, unit_centers)
    return float(d[np.arange(x.shape[0]), assignments].sum())


def spherical_kmeans(features, init_centers, max_iter: int = 50, tol: float = 1e-6) -> ClusterModel:
    """Lloyd iterations under cosine distance starting from ``init_centers``.

    Center k is the normalized mean of its members' unit directions, which is
    the minimizer of the summed cosine distance for that cluster.  A cluster
    that empties, or whose member directions cancel, is reset to its initial
    center so cluster k keeps meaning class k.  Ties go to the lowest index.
    """
    x = _as_matrix(features)
    init = _as_matrix(init_centers)
    n = x.shape[0]
    k = init.shape[0]
    if init.ndim != 2 or init.shape[1] != x.shape[1]:
        raise ContractError(f"centers {init.shape} do not match features {x.shape}")
    if n < k:
        raise ContractError(f"need at least K={k} samples, got {n}")
    if max_iter < 1:
        raise ContractError("max_iter must be >= 1")
    init = _normalize_rows(init, "initial centers")

    norms = np.linalg.norm(x, axis=1)
    if np.any(norms <= _ZERO_NORM):
        raise DegenerateVectorError(f"{int(np.sum(norms <= _ZERO_NORM))} zero-norm feature vector(s)")
    unit_x = x / norms[:, None]

    centers = init.copy()
    assignments = None
    trace: list[float] = []
    repaired = 0
    it = 0
    for it in range(1, max_iter + 1):
        dist = 0.5 * (1.0 - np.clip(unit_x @ centers.T, -1.0, 1.0))
        new_assign = np.argmin(dist, axis=1)
        trace.append(float(dist[np.arange(n), new_assign].sum()))
        unchanged = assignments is not None and np.array_equal(new_assign, assignments)
        assignments = new_assign
        if unchanged:
            break

        # order-fixed reduction keeps the update deterministic
        sums = np.zeros_like(centers)
        np.add.at(sums, assignments, unit_x)
        snorm = np.linalg.norm(sums, axis=1)
        ok = snorm > _ZERO_NORM
        repaired += int(np.sum(~ok))
        centers = np.where(ok[:, None], sums / np.where(ok, snorm, 1.0)[:, None], init)

        if len(trace) >= 2 and trace[-2] - trace[-1] < tol:
            break

    return ClusterModel(centers=centers, assignments=assignments, objective_trace=trace, iterations_run=it, repaired=repaired)
