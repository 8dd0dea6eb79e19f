"""Linear self-paced weighting and pace schedules."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

GAMMA_FLOOR = 1e-6


class NonPositiveGamma(ValueError):
    pass


class NegativePairLoss(ValueError):
    pass


class UnknownLabel(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


class DegeneratePace(RuntimeWarning):
    pass


def _check_gamma(gamma) -> None:
    if not np.all(np.asarray(gamma) > 0):
        raise NonPositiveGamma(f"pace must be > 0, got {gamma}")


def regularizer(w, gamma: float):
    """R(w) = -gamma * w. Works on scalars and arrays."""
    _check_gamma(gamma)
    return -gamma * np.asarray(w, dtype=np.float64) if np.ndim(w) else -gamma * float(w)


def optimal_weight(l, gamma: float):
    """Soft pair weight max(1 - l/gamma, 0).

    This is the minimiser of w*l + gamma*(w**2/2 - w) on [0, 1]. Against the
    linear regulariser alone the minimiser is the hard indicator l < gamma;
    see ``hard_weight``.
    """
    _check_gamma(gamma)
    arr = np.asarray(l, dtype=np.float64)
    if np.any(arr < 0):
        raise NegativePairLoss("pair losses are non-negative by construction")
    w = np.maximum(1.0 - arr / gamma, 0.0)
    return w if np.ndim(l) else float(w)


def hard_weight(l, gamma: float):
    """Minimiser of w*l - gamma*w on [0, 1] (ties at l == gamma resolve to 0)."""
    _check_gamma(gamma)
    arr = np.asarray(l, dtype=np.float64)
    if np.any(arr < 0):
        raise NegativePairLoss("pair losses are non-negative by construction")
    w = (arr < gamma).astype(np.float64)
    return w if np.ndim(l) else float(w)


def source_weights(labels_i, labels_j=None) -> np.ndarray | int:
    """Indicator of equal identity labels.

    Scalar arguments give 0/1; a single label array gives the full pairwise
    matrix with a zero diagonal (self pairs never enter the loss).
    """
    if labels_i is None:
        raise UnknownLabel("source weights need known identities")
    if labels_j is not None and np.ndim(labels_i) == 0:
        if labels_i < 0 or labels_j < 0:
            raise UnknownLabel("source weights need known identities")
        return int(labels_i == labels_j)
    a = np.asarray(labels_i)
    b = a if labels_j is None else np.asarray(labels_j)
    if np.any(a < 0) or np.any(b < 0):
        raise UnknownLabel("source weights need known identities")
    w = (a[:, None] == b[None, :]).astype(np.float64)
    if labels_j is None:
        np.fill_diagonal(w, 0.0)
    return w


def kth_neighbor_radius(dist: np.ndarray, k: int, skip_diagonal: bool = False) -> np.ndarray:
    """Per-row distance to the k-th nearest column; NaN entries are not candidates."""
    d = np.array(dist, dtype=np.float64)
    if skip_diagonal:
        np.fill_diagonal(d, np.nan)
    d = np.where(np.isnan(d), np.inf, d)
    avail = np.isfinite(d).sum(axis=1)
    if k < 1 or np.any(avail < k):
        raise TooFewSamples(f"need more than k={k} candidates per row")
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def gamma_from_knn(reps, k: int = 4) -> float:
    """Largest Euclidean distance from a sample to its k-th nearest neighbour."""
    x = np.asarray(reps, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if not (1 <= k < len(x)):
        raise TooFewSamples(f"need more than k={k} samples, got {len(x)}")
    d = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2)
    return floor_gamma(float(kth_neighbor_radius(d, k, skip_diagonal=True).max()))


def floor_gamma(gamma: float) -> float:
    if gamma < GAMMA_FLOOR:
        warnings.warn(f"pace {gamma} from zero-spread data; flooring at {GAMMA_FLOOR}",
                      DegeneratePace, stacklevel=2)
        return GAMMA_FLOOR
    return gamma


@dataclass
class SelfPacedState:
    gamma: float = 0.1
    alpha: float = 0.1
    weights: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    epoch: int = 0

    def __post_init__(self):
        _check_gamma(self.gamma)
        if self.alpha < 0:
            raise ValueError("growth rate alpha must be >= 0")


def gamma_step(state: SelfPacedState) -> float:
    """Multiplicative pace growth: gamma <- (1 + alpha) * gamma."""
    state.gamma = (1.0 + state.alpha) * state.gamma
    return state.gamma
