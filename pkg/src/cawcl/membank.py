"""Epoch-scoped memory bank of contrast keys with momentum updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import NORM_FLOOR, NearZeroNorm, normalize_rows
from .pseudo import OUTLIER, ClusterAssignment

CENTROID, OUTLIER_KEY, SOURCE = "centroid", "outlier", "source"


class EmptyInput(ValueError):
    pass


class BadMomentum(ValueError):
    pass


class UnknownSample(KeyError):
    pass


def momentum_update(key, query, m: float) -> np.ndarray:
    """m * key + (1 - m) * query, renormalised to unit length."""
    if not 0.0 <= m <= 1.0:
        raise BadMomentum(f"momentum must lie in [0, 1], got {m}")
    key = np.asarray(key, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if key.shape != query.shape:
        raise ValueError(f"key {key.shape} vs query {query.shape}")
    if m == 1.0:
        return key.copy()
    mixed = m * key + (1.0 - m) * query
    n = np.linalg.norm(mixed)
    if n <= NORM_FLOOR:
        raise NearZeroNorm("key and query cancel out")
    return mixed / n


@dataclass
class MemoryBank:
    """Unit-norm keys in a fixed order: target centroids by cluster id, then
    target outliers by sample id, then (optionally) source class centroids
    by label."""

    keys: np.ndarray
    kinds: list[str]
    members: list[np.ndarray]
    momentum: float = 0.2
    target_key: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    source_key: dict[int, int] = field(default_factory=dict)
    n_clusters: int = 0

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def target_keys(self) -> np.ndarray:
        return np.array([i for i, k in enumerate(self.kinds) if k != SOURCE], dtype=np.int64)

    def key_of_target(self, sample: int) -> int:
        if not 0 <= sample < len(self.target_key):
            raise UnknownSample(sample)
        return int(self.target_key[sample])

    def key_of_source(self, label: int) -> int:
        try:
            return self.source_key[int(label)]
        except KeyError:
            raise UnknownSample(f"source label {label}") from None

    def update_target(self, sample: int, query) -> None:
        k = self.key_of_target(sample)
        self.keys[k] = momentum_update(self.keys[k], query, self.momentum)

    def update_source(self, label: int, query) -> None:
        k = self.key_of_source(label)
        self.keys[k] = momentum_update(self.keys[k], query, self.momentum)


def rebuild(features, assignment: ClusterAssignment, momentum: float = 0.2,
            source_features=None, source_labels=None) -> MemoryBank:
    """One centroid key per cluster, one key per unclustered sample.

    ``features`` must already be unit rows. Source class centroids are
    appended when source features are given.
    """
    if not 0.0 <= momentum <= 1.0:
        raise BadMomentum(f"momentum must lie in [0, 1], got {momentum}")
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(assignment.labels)
    if len(x) == 0:
        raise EmptyInput("no features to store")
    if len(labels) != len(x):
        raise ValueError("assignment does not cover every sample")

    keys, kinds, members = [], [], []
    target_key = np.empty(len(x), dtype=np.int64)
    for c in range(assignment.n_clusters):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            raise ValueError(f"cluster {c} has no members")
        target_key[idx] = len(keys)
        keys.append(x[idx].mean(axis=0))
        kinds.append(CENTROID)
        members.append(idx)
    for i in np.flatnonzero(labels == OUTLIER):
        target_key[i] = len(keys)
        keys.append(x[i])
        kinds.append(OUTLIER_KEY)
        members.append(np.array([i]))

    source_key: dict[int, int] = {}
    if source_features is not None:
        sx = np.asarray(source_features, dtype=np.float64)
        sl = np.asarray(source_labels)
        for lab in np.unique(sl):
            idx = np.flatnonzero(sl == lab)
            source_key[int(lab)] = len(keys)
            keys.append(sx[idx].mean(axis=0))
            kinds.append(SOURCE)
            members.append(idx)

    return MemoryBank(normalize_rows(np.stack(keys)), kinds, members, momentum,
                      target_key, source_key, assignment.n_clusters)


def contrast_keys(bank: MemoryBank, exclude: int) -> tuple[np.ndarray, int]:
    """All keys (detached copies) and the index of the key owning target sample ``exclude``."""
    if len(bank) == 0:
        raise EmptyInput("empty memory bank")
    return bank.keys.copy(), bank.key_of_target(exclude)
