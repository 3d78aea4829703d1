"""External clustering validity metrics and the K-means baseline.

NMI uses natural-log entropies normalized by the arithmetic mean of the two
partition entropies. ARI is the standard pair-counting form and is reported
unclamped (it can be negative). ACC maximizes the matched fraction over
cluster-to-class bijections via a minimum-cost assignment on the negated
contingency table.
"""

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class ContingencyTable:
    counts: np.ndarray
    row_marginals: np.ndarray
    col_marginals: np.ndarray
    total: int


def contingency_table(y_true, y_pred, k_true=None, k_pred=None) -> ContingencyTable:
    yt = np.asarray(y_true, dtype=np.int64)
    yp = np.asarray(y_pred, dtype=np.int64)
    if yt.shape != yp.shape or yt.ndim != 1:
        raise ValueError("label vectors must be 1-D and of equal length")
    if yt.size == 0:
        raise ValueError("label vectors are empty")
    if yt.min() < 0 or yp.min() < 0:
        raise ValueError("labels must be non-negative")
    r = int(yt.max()) + 1 if k_true is None else k_true
    c = int(yp.max()) + 1 if k_pred is None else k_pred
    counts = np.zeros((r, c), dtype=np.int64)
    np.add.at(counts, (yt, yp), 1)
    return ContingencyTable(
        counts=counts,
        row_marginals=counts.sum(axis=1),
        col_marginals=counts.sum(axis=0),
        total=int(yt.size),
    )


def nmi(y_true, y_pred) -> float:
    """Normalized mutual information: 2 I(U;V) / (H(U) + H(V)), natural logs."""
    table = contingency_table(y_true, y_pred)
    n = table.total
    pa = table.row_marginals / n
    pb = table.col_marginals / n
    h_true = -sum(p * math.log(p) for p in pa if p > 0)
    h_pred = -sum(p * math.log(p) for p in pb if p > 0)
    if h_true + h_pred == 0.0:
        return 1.0  # both partitions are a single cluster: trivially identical
    info = 0.0
    rows, cols = np.nonzero(table.counts)
    for i, j in zip(rows, cols):
        pij = table.counts[i, j] / n
        info += pij * math.log(pij / (pa[i] * pb[j]))
    return 2.0 * info / (h_true + h_pred)


def _comb2(x: int) -> int:
    return x * (x - 1) // 2


def ari(y_true, y_pred) -> float:
    """Adjusted Rand index by pair counting; 1.0 for identical partitions."""
    table = contingency_table(y_true, y_pred)
    if table.total < 2:
        raise ValueError("ARI needs at least two samples")
    sum_cells = sum(_comb2(int(v)) for v in table.counts.ravel())
    sum_a = sum(_comb2(int(v)) for v in table.row_marginals)
    sum_b = sum(_comb2(int(v)) for v in table.col_marginals)
    n2 = _comb2(table.total)
    expected = sum_a * sum_b / n2
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0  # degenerate identical partitions (single cluster or all singletons)
    return (sum_cells - expected) / (max_index - expected)


def acc(y_true, y_pred, k: int) -> float:
    """Best-bijection clustering accuracy over cluster-to-class relabelings."""
    yt = np.asarray(y_true, dtype=np.int64)
    yp = np.asarray(y_pred, dtype=np.int64)
    if yt.shape != yp.shape:
        raise ValueError("label vectors must have equal length")
    if yt.size and (max(yt.max(), yp.max()) >= k or min(yt.min(), yp.min()) < 0):
        raise ValueError(f"labels must lie in [0, {k})")
    table = contingency_table(yt, yp, k_true=k, k_pred=k)
    _, total = optimal_assignment(-table.counts.astype(np.float64))
    return -total / table.total


def optimal_assignment(cost: np.ndarray):
    """Minimum-cost perfect matching on a square matrix (augmenting-path Hungarian).

    Returns (perm, total) where perm[i] is the column assigned to row i.
    """
    a = np.asarray(cost, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("cost matrix must be finite")
    n = a.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[j] = row occupying column j, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            cand = a[i0 - 1, :] - u[i0] - v[1:]
            better = ~used[1:] & (cand < minv[1:])
            minv[1:][better] = cand[better]
            way[1:][better] = j0
            free = np.where(~used[1:])[0] + 1
            j1 = int(free[np.argmin(minv[free])])
            delta = minv[j1]
            u[match[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = int(way[j0])
            match[j0] = match[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[match[j] - 1] = j - 1
    total = float(a[np.arange(n), perm].sum())
    return perm, total


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 100):
    """Lloyd's algorithm with greedy k-means++ seeding.

    Stops at an assignment fixed point or after max_iter sweeps; empty clusters
    are re-seeded to the point farthest from its assigned centroid. Returns
    (assignments, centroids, inertia).
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("points must be an n x d matrix")
    n = x.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"need n >= k >= 1, got n={n}, k={k}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    n_trials = 2 + int(math.log(k)) if k > 1 else 0
    for c in range(1, k):
        total = d2.sum()
        if total > 0:
            cand = rng.choice(n, size=n_trials, p=d2 / total)
        else:
            cand = rng.integers(n, size=n_trials)
        best_pot, best_d2, best_idx = np.inf, None, None
        for idx in cand:
            nd2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
            pot = nd2.sum()
            if pot < best_pot:
                best_pot, best_d2, best_idx = pot, nd2, idx
        centroids[c] = x[best_idx]
        d2 = best_d2

    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        dists = np.sum((x[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(dists, axis=1)
        point_d2 = dists[np.arange(n), new_assign]
        for c in range(k):
            if not np.any(new_assign == c):
                far = int(np.argmax(point_d2))
                centroids[c] = x[far]
                new_assign[far] = c
                point_d2[far] = 0.0
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            centroids[c] = x[assign == c].mean(axis=0)
    dists = np.sum((x[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    inertia = float(dists[np.arange(n), assign].sum())
    return assign, centroids, inertia


def evaluate(y_true, y_pred, k: int | None = None) -> dict:
    """All three metrics in one record: {"nmi", "ari", "acc"}."""
    yt = np.asarray(y_true, dtype=np.int64)
    yp = np.asarray(y_pred, dtype=np.int64)
    if k is None:
        k = int(max(yt.max(), yp.max())) + 1
    return {
        "nmi": float(nmi(yt, yp)),
        "ari": float(ari(yt, yp)),
        "acc": float(acc(yt, yp, k)),
    }
