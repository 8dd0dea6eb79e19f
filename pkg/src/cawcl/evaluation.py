"""Retrieval metrics (CMC, mAP) and a linear camera probe."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .diffcore import ShapeMismatch, log_softmax, normalize_rows

CSV_HEADER = "epoch,rank1,rank5,rank10,mAP,camera_probe_acc,loss_ce,loss_cam,loss_contr"


class NoValidMatch(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


def distance_matrix(query_reps, gallery_reps) -> np.ndarray:
    """Euclidean distances between l2-normalised query and gallery rows."""
    q = np.atleast_2d(np.asarray(query_reps, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery_reps, dtype=np.float64))
    if q.shape[1] != g.shape[1]:
        raise ShapeMismatch(f"query dim {q.shape[1]} vs gallery dim {g.shape[1]}")
    q, g = normalize_rows(q), normalize_rows(g)
    return np.linalg.norm(q[:, None, :] - g[None, :, :], axis=2)


def _ranked_matches(dist, q_ids, q_cams, g_ids, g_cams):
    """Yield, per query, the boolean match vector over its valid gallery ranking."""
    dist = np.asarray(dist, dtype=np.float64)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    if dist.shape != (len(q_ids), len(g_ids)):
        raise ShapeMismatch(f"dist {dist.shape} vs {len(q_ids)} queries x {len(g_ids)} gallery")
    for qi in range(len(q_ids)):
        order = np.argsort(dist[qi], kind="stable")
        keep = ~((g_ids[order] == q_ids[qi]) & (g_cams[order] == q_cams[qi]))
        matches = g_ids[order][keep] == q_ids[qi]
        if not matches.any():
            raise NoValidMatch(f"query {qi} has no cross-camera match in the gallery")
        yield matches


def cmc_curve(dist, q_ids, q_cams, g_ids, g_cams) -> np.ndarray:
    """curve[r] = fraction of queries whose first correct match is within the top r+1."""
    n_g = np.asarray(dist).shape[1]
    curve = np.zeros(n_g)
    n_q = 0
    for matches in _ranked_matches(dist, q_ids, q_cams, g_ids, g_cams):
        curve[int(np.argmax(matches)):] += 1.0
        n_q += 1
    return curve / n_q


def cmc(dist, q_ids, q_cams, g_ids, g_cams, ks=(1, 5, 10)) -> dict[int, float]:
    curve = cmc_curve(dist, q_ids, q_cams, g_ids, g_cams)
    return {k: float(curve[min(k, len(curve)) - 1]) for k in ks}


def _exact_ap(matches: np.ndarray) -> Fraction:
    hits = np.flatnonzero(matches)
    if len(hits) == 0:
        raise NoValidMatch("no relevant item in the ranking")
    total = sum(Fraction(n, int(r) + 1) for n, r in enumerate(hits, 1))
    return total / len(hits)


def average_precision(matches: np.ndarray) -> float:
    """Mean precision at the ranks of the relevant items, rounded once at the end."""
    return float(_exact_ap(np.asarray(matches, dtype=bool)))


def mean_average_precision(dist, q_ids, q_cams, g_ids, g_cams) -> float:
    aps = [_exact_ap(m) for m in _ranked_matches(dist, q_ids, q_cams, g_ids, g_cams)]
    return float(sum(aps) / len(aps))


def camera_probe(reps, cams, steps: int = 200, lr: float = 0.1, seed: int = 0) -> float:
    """Held-out accuracy of a linear softmax camera classifier on frozen features.

    Per camera, half of the samples (after a seeded shuffle) train the probe
    and the rest measure it. Features are standardised with training
    statistics; the probe runs ``steps`` full-batch gradient steps from zero.
    """
    x = np.asarray(reps, dtype=np.float64)
    cams = np.asarray(cams)
    classes, y = np.unique(cams, return_inverse=True)
    if len(classes) < 2:
        raise TooFewSamples("camera probe needs at least two cameras")
    counts = np.bincount(y)
    if counts.min() < 4:
        raise TooFewSamples("camera probe needs at least 4 samples per camera")

    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(len(classes)):
        idx = rng.permutation(np.flatnonzero(y == c))
        half = len(idx) // 2
        train.extend(idx[:half])
        test.extend(idx[half:])
    train, test = np.sort(train), np.sort(test)

    mu = x[train].mean(axis=0)
    sd = x[train].std(axis=0)
    sd[sd < 1e-12] = 1.0
    z = (x - mu) / sd
    xt, yt = z[train], y[train]
    onehot = np.eye(len(classes))[yt]
    W = np.zeros((x.shape[1], len(classes)))
    b = np.zeros(len(classes))
    for _ in range(steps):
        p = np.exp(log_softmax(xt @ W + b))
        g = (p - onehot) / len(yt)
        W -= lr * xt.T @ g
        b -= lr * g.sum(axis=0)
    pred = np.argmax(z[test] @ W + b, axis=1)
    return float(np.mean(pred == y[test]))


@dataclass
class MetricsReport:
    rank: dict[int, float]
    mAP: float
    camera_probe_accuracy: float
    epoch: int = 0
    losses: dict[str, float] = field(default_factory=lambda: {"ce": 0.0, "cam": 0.0, "contr": 0.0})

    @property
    def rank1(self) -> float:
        return self.rank[1]

    def csv_row(self) -> str:
        vals = [self.rank.get(1, 0.0), self.rank.get(5, 0.0), self.rank.get(10, 0.0), self.mAP,
                self.camera_probe_accuracy, self.losses.get("ce", 0.0),
                self.losses.get("cam", 0.0), self.losses.get("contr", 0.0)]
        return ",".join([str(self.epoch)] + [f"{v:.6g}" for v in vals])


def retrieval_report(reps, ids, cams, epoch: int = 0, losses: dict | None = None) -> MetricsReport:
    """All-vs-all cross-camera retrieval over one set of tracklets."""
    d = distance_matrix(reps, reps)
    ranks = cmc(d, ids, cams, ids, cams)
    return MetricsReport(ranks, mean_average_precision(d, ids, cams, ids, cams),
                         camera_probe(normalize_rows(reps), cams), epoch,
                         dict(losses) if losses else {"ce": 0.0, "cam": 0.0, "contr": 0.0})
