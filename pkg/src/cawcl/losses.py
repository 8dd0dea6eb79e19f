"""Training objectives: identity CE, camera CE / confusion, self-paced contrastive."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import NonFiniteLoss, Tensor
from .model import CameraClassifier, IdentityClassifier
from .selfpaced import regularizer


class NoSourceRows(ValueError):
    pass


class NoTargetRows(ValueError):
    pass


class WeightOutOfRange(ValueError):
    pass


class SelfPair(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    delta1: float = 1.0
    delta2: float = 0.2
    delta3: float = 1.0

    def __post_init__(self):
        if min(self.delta1, self.delta2, self.delta3) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class BatchView:
    """Representations of one mixed batch.

    ``ids`` holds 0-based identity labels for source rows and -1 for target
    rows; ``cams`` holds 0-based target camera labels and -1 for source rows.
    """

    g: Tensor
    ids: np.ndarray
    cams: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.cams = np.asarray(self.cams, dtype=np.int64)
        if len(self.ids) != self.g.shape[0] or len(self.cams) != self.g.shape[0]:
            raise ValueError("label arrays must match the number of rows")

    @property
    def source_rows(self) -> np.ndarray:
        return np.flatnonzero(self.ids >= 0)

    @property
    def target_rows(self) -> np.ndarray:
        return np.flatnonzero(self.cams >= 0)


def check_finite(name: str, loss: Tensor) -> Tensor:
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteLoss(f"{name} loss is not finite")
    return loss


def _mean_nll(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = dc.pick(dc.log_softmax_rows(logits), labels)
    return dc.scale(dc.total(logp), -1.0 / len(labels))


def identity_ce(batch: BatchView, cls: IdentityClassifier) -> Tensor:
    rows = batch.source_rows
    if len(rows) == 0:
        raise NoSourceRows("identity CE needs at least one source row")
    labels = batch.ids[rows]
    if labels.max() >= cls.n_classes:
        raise ValueError(f"identity label {labels.max()} outside classifier range")
    return _mean_nll(cls.logits(dc.rows(batch.g, rows)), labels)


def camera_ce(batch: BatchView, cam: CameraClassifier, reverse: bool = True) -> Tensor:
    rows = batch.target_rows
    if len(rows) == 0:
        raise NoTargetRows("camera loss needs at least one target row")
    return _mean_nll(cam.logits(dc.rows(batch.g, rows), reverse), batch.cams[rows])


def confusion_from_scores(scores: Tensor, labels: np.ndarray) -> Tensor:
    """Product of the true-camera log-likelihood sums on ``c`` and on ``1 - c``,
    divided by the squared batch size."""
    nb = scores.shape[0]
    first = dc.total(dc.pick(dc.log_softmax_rows(scores), labels))
    flipped = dc.add(dc.scale(scores, -1.0), 1.0)
    second = dc.total(dc.pick(dc.log_softmax_rows(flipped), labels))
    return dc.scale(dc.mul(first, second), 1.0 / (nb * nb))


def camera_confusion(batch: BatchView, cam: CameraClassifier, reverse: bool = True) -> Tensor:
    rows = batch.target_rows
    if len(rows) == 0:
        raise NoTargetRows("camera loss needs at least one target row")
    return confusion_from_scores(cam.logits(dc.rows(batch.g, rows), reverse), batch.cams[rows])


# --------------------------------------------------------------- contrastive


def pair_loss_matrix(reps, temperature: float = 1.0) -> np.ndarray:
    """All l_ij over a set of unit vectors; the diagonal is NaN."""
    x = np.asarray(reps, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ValueError("need at least two representations")
    mask = ~np.eye(n, dtype=bool)
    l = -dc.log_softmax_rows(Tensor(x @ x.T / temperature), mask).data
    l[~mask] = np.nan
    return l


def pair_loss(i: int, j: int, reps, temperature: float = 1.0) -> float:
    n = len(reps)
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"pair ({i}, {j}) outside set of size {n}")
    if i == j:
        raise SelfPair("l_ii is undefined")
    return float(pair_loss_matrix(reps, temperature)[i, j])


def pair_losses(queries: Tensor, keys: np.ndarray | Tensor, allowed: np.ndarray,
                temperature: float = 1.0) -> Tensor:
    """l between each query row and each key; keys carry no gradient.

    Entries where ``allowed`` is False are left out of the denominator and
    come back as 0.
    """
    if isinstance(keys, Tensor):
        keys = keys.detach().data
    kt = Tensor(np.asarray(keys, dtype=np.float64).T)
    sims = dc.matmul(queries, kt)
    if temperature != 1.0:
        sims = dc.scale(sims, 1.0 / temperature)
    return dc.scale(dc.log_softmax_rows(sims, allowed), -1.0)


def weighted_pair_sum(l: Tensor, weights: np.ndarray, n: int,
                      gamma: float | None = None, allowed: np.ndarray | None = None) -> Tensor:
    """(1/n) * sum over allowed pairs of w*l + R_gamma(w); R is skipped for gamma=None."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != l.shape:
        raise ValueError(f"weights {w.shape} vs pair losses {l.shape}")
    if allowed is not None:
        w = np.where(allowed, w, 0.0)
    if np.any(w < 0) or np.any(w > 1) or not np.all(np.isfinite(w)):
        raise WeightOutOfRange("self-paced weights must lie in [0, 1]")
    out = dc.scale(dc.total(dc.mul(l, Tensor(w))), 1.0 / n)
    if gamma is not None:
        reg = float(regularizer(w, gamma).sum()) / n
        out = dc.add(out, reg)
    return out


def contrastive(reps, weights, gamma: float | None = None,
                temperature: float = 1.0) -> Tensor:
    """Self-paced contrastive loss over one representation set.

    ``reps`` are unit rows (a Tensor to differentiate through them).
    ``weights`` is N x N with entries in [0, 1]; its diagonal is ignored.
    With ``gamma=None`` the regulariser term is omitted, and all-ones weights
    give the plain contrastive loss.
    """
    q = reps if isinstance(reps, Tensor) else Tensor(reps)
    n = q.shape[0]
    if n < 2:
        raise ValueError("need at least two representations")
    allowed = ~np.eye(n, dtype=bool)
    sims = dc.matmul(q, dc.transpose(q))
    if temperature != 1.0:
        sims = dc.scale(sims, 1.0 / temperature)
    l = dc.scale(dc.log_softmax_rows(sims, allowed), -1.0)
    return weighted_pair_sum(l, weights, n, gamma, allowed)


def contrastive_unweighted(reps, temperature: float = 1.0) -> Tensor:
    n = reps.shape[0] if isinstance(reps, Tensor) else len(reps)
    return contrastive(reps, np.ones((n, n)), None, temperature)


def total_loss(parts, weights: LossWeights):
    """delta-weighted sum of (identity CE, camera loss, contrastive loss).

    Parts may be floats or scalar Tensors.
    """
    ce, cam, contr = parts
    terms = [(weights.delta1, ce), (weights.delta2, cam), (weights.delta3, contr)]
    if not any(isinstance(t, Tensor) for _, t in terms):
        return weights.delta1 * ce + weights.delta2 * cam + weights.delta3 * contr
    out = None
    for d, t in terms:
        if d == 0.0:
            continue
        term = dc.scale(t, d) if isinstance(t, Tensor) else Tensor(d * t)
        out = term if out is None else dc.add(out, term)
    return out if out is not None else Tensor(0.0)
