"""Pseudo-labels from k-reciprocal Jaccard distances and DBSCAN."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import normalize_rows

OUTLIER = -1


class BadK(ValueError):
    pass


class AsymmetricMatrix(ValueError):
    pass


class BadEps(ValueError):
    pass


class BadMinPts(ValueError):
    pass


@dataclass(frozen=True)
class ReciprocalSets:
    sets: tuple[frozenset, ...]
    k: int

    def __len__(self) -> int:
        return len(self.sets)

    def __getitem__(self, i: int) -> frozenset:
        return self.sets[i]

    def membership(self) -> np.ndarray:
        n = len(self.sets)
        m = np.zeros((n, n), dtype=bool)
        for i, s in enumerate(self.sets):
            m[i, list(s)] = True
        return m


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    n_clusters: int

    @property
    def outliers(self) -> np.ndarray:
        return np.flatnonzero(self.labels == OUTLIER)

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)


def euclidean_matrix(x, y=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = x if y is None else np.asarray(y, dtype=np.float64)
    return np.linalg.norm(x[:, None, :] - y[None, :, :], axis=2)


def _check_square(dist: np.ndarray) -> np.ndarray:
    d = np.asarray(dist, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise AsymmetricMatrix(f"distance matrix must be square, got {d.shape}")
    if not np.all(np.isfinite(d)):
        raise ValueError("distance matrix has non-finite entries")
    if not np.allclose(d, d.T, rtol=0, atol=1e-12):
        raise AsymmetricMatrix("distance matrix is not symmetric")
    if np.any(np.diag(d) != 0):
        raise AsymmetricMatrix("distance matrix needs a zero diagonal")
    return d


def knn_sets(dist, k: int) -> np.ndarray:
    """Row i lists the k nearest other indices, nearest first; ties go to the lower index."""
    d = _check_square(dist)
    n = len(d)
    if not (1 <= k < n):
        raise BadK(f"k must be in [1, {n - 1}], got {k}")
    d = d.copy()
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :k]


def k_reciprocal(knn: np.ndarray) -> ReciprocalSets:
    knn = np.asarray(knn)
    n, k = knn.shape
    nb = np.zeros((n, n), dtype=bool)
    nb[np.repeat(np.arange(n), k), knn.ravel()] = True
    mutual = nb & nb.T
    np.fill_diagonal(mutual, True)
    return ReciprocalSets(tuple(frozenset(np.flatnonzero(r).tolist()) for r in mutual), k)


def jaccard_matrix(rsets: ReciprocalSets) -> np.ndarray:
    m = rsets.membership().astype(np.int64)
    inter = m @ m.T
    size = m.sum(axis=1)
    union = size[:, None] + size[None, :] - inter
    d = 1.0 - inter / union
    np.fill_diagonal(d, 0.0)
    return d


def dbscan(dist, eps: float, min_pts: int) -> ClusterAssignment:
    """Density clustering on a precomputed distance matrix.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Points are scanned in index order and cluster ids follow
    discovery order; a border point joins the first cluster that reaches it.
    """
    if not eps > 0:
        raise BadEps(f"eps must be > 0, got {eps}")
    if min_pts < 1:
        raise BadMinPts(f"min_pts must be >= 1, got {min_pts}")
    d = np.asarray(dist, dtype=np.float64)
    n = len(d)
    neighbors = [np.flatnonzero(row <= eps) for row in d]
    core = np.array([len(nb) >= min_pts for nb in neighbors], dtype=bool)
    labels = np.full(n, OUTLIER, dtype=np.int64)
    cluster = 0
    for p in range(n):
        if labels[p] != OUTLIER or not core[p]:
            continue
        labels[p] = cluster
        queue = deque([p])
        while queue:
            q = queue.popleft()
            if not core[q]:
                continue
            for r in neighbors[q]:
                if labels[r] == OUTLIER:
                    labels[r] = cluster
                    queue.append(r)
        cluster += 1
    return ClusterAssignment(labels, cluster)


@dataclass(frozen=True)
class ClusterParams:
    k: int = 20
    eps: float = 0.6
    min_pts: int = 4


def jaccard_from_reps(reps, k: int = 20) -> tuple[np.ndarray, int]:
    x = normalize_rows(reps)
    k = min(k, len(x) - 1)
    return jaccard_matrix(k_reciprocal(knn_sets(euclidean_matrix(x), k))), k


def assign_pseudo_labels(target_reps, params: ClusterParams = ClusterParams()) -> ClusterAssignment:
    x = np.asarray(target_reps, dtype=np.float64)
    if len(x) < max(params.min_pts, 2):
        raise ValueError(f"need at least {max(params.min_pts, 2)} samples to cluster")
    jac, _ = jaccard_from_reps(x, params.k)
    return dbscan(jac, params.eps, params.min_pts)


def dump_jaccard(path: str | Path, jac: np.ndarray, labels: np.ndarray,
                 k: int, eps: float, min_pts: int) -> None:
    """Debug artifact: header ``N k eps min_pts``, then one line per sample:
    its label followed by its Jaccard row."""
    lines = [f"{len(jac)} {k} {eps!r} {min_pts}"]
    for lab, row in zip(labels, jac):
        lines.append(" ".join([str(int(lab))] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")
