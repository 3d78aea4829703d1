"""Pairwise similarity construction and the two-stage clustering loss.

Both training stages share one loss shape: selected same-pair entries of the
batch similarity matrix are pushed toward 1 and selected different-pair
entries toward 0, with the negative side weighted by a hyperparameter. The
stages differ only in how pairs are selected (true labels vs. similarity
thresholds).
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

CLAMP_EPS = 1e-7
_NORM_TOL = 1e-6


@dataclass
class PairMatrices:
    """Boolean same-pair / different-pair selection matrices."""

    positive: np.ndarray
    negative: np.ndarray

    def __post_init__(self):
        self.positive = np.asarray(self.positive, dtype=bool)
        self.negative = np.asarray(self.negative, dtype=bool)
        if self.positive.shape != self.negative.shape:
            raise ValueError("positive/negative shape mismatch")


def similarity_matrix(features: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities of unit-norm non-negative feature rows: F @ F.T."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError(f"expected an m x k feature matrix, got shape {f.shape}")
    norms = np.linalg.norm(f, axis=1)
    if np.any(np.abs(norms - 1.0) > _NORM_TOL):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValueError(f"feature rows must have unit norm (worst deviation {worst:.3g})")
    if np.any(f < -_NORM_TOL):
        raise ValueError("feature rows must be non-negative")
    s = f @ f.T
    return np.clip(s, 0.0, 1.0)


def pairs_from_labels(labels, k: int) -> PairMatrices:
    """Ground-truth pair selection: positive iff equal labels, negative otherwise."""
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1:
        raise ValueError("labels must be a 1-D sequence")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    positive = y[:, None] == y[None, :]
    return PairMatrices(positive=positive, negative=~positive)


def pairs_from_similarity(sim: np.ndarray, u: float, l: float) -> PairMatrices:
    """Threshold-gated pair selection: positive where S >= u, negative where S <= l.

    Entries with l < S < u are selected by neither matrix and are excluded from
    the loss. The diagonal is always positive and never negative.
    """
    if not (0.0 <= l < u <= 1.0):
        raise ValueError(f"thresholds must satisfy 0 <= l < u <= 1, got u={u}, l={l}")
    s = np.asarray(sim, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError("similarity matrix must be square")
    positive = s >= u
    negative = s <= l
    np.fill_diagonal(positive, True)
    np.fill_diagonal(negative, False)
    return PairMatrices(positive=positive, negative=negative)


class PairwiseLoss(NamedTuple):
    loss: float
    grad: np.ndarray
    num_selected: int


def pairwise_loss(sim: np.ndarray, pairs: PairMatrices, lam: float) -> PairwiseLoss:
    """Mean binary-cross-entropy-shaped loss over selected off-diagonal pairs.

    With St = clamp(S, eps, 1-eps): each selected positive pair contributes
    -log St, each selected negative pair contributes -lam * log(1 - St); the
    sum is divided by the number of selected off-diagonal entries. A batch
    with no selected pairs yields loss 0 (num_selected tells the caller).

    Returns the loss, its exact gradient with respect to each S entry (zero
    where clamped or unselected), and the selected-pair count.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    s = np.asarray(sim, dtype=np.float64)
    m = s.shape[0]
    offdiag = ~np.eye(m, dtype=bool)
    sel_pos = pairs.positive & offdiag
    sel_neg = pairs.negative & offdiag
    num_selected = int(np.count_nonzero(sel_pos | sel_neg))
    if num_selected == 0:
        return PairwiseLoss(0.0, np.zeros_like(s), 0)

    st = np.clip(s, CLAMP_EPS, 1.0 - CLAMP_EPS)
    loss = (-np.sum(np.log(st[sel_pos])) - lam * np.sum(np.log1p(-st[sel_neg]))) / num_selected

    interior = (s > CLAMP_EPS) & (s < 1.0 - CLAMP_EPS)
    grad = np.zeros_like(s)
    grad -= np.where(sel_pos & interior, 1.0 / st, 0.0)
    grad += lam * np.where(sel_neg & interior, 1.0 / (1.0 - st), 0.0)
    grad /= num_selected
    return PairwiseLoss(float(loss), grad, num_selected)


def feature_gradient(features: np.ndarray, grad_sim: np.ndarray) -> np.ndarray:
    """Chain d(loss)/dS through S = F F^T: returns d(loss)/dF = (G + G^T) F."""
    g = np.asarray(grad_sim, dtype=np.float64)
    return (g + g.T) @ np.asarray(features, dtype=np.float64)
