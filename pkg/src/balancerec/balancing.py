"""Distribution balancing across item-conditioned user groups.

Groups are the rows of the balanced representation phi(u) bucketed by the
item of each observed interaction. The distance between two groups is an
integral probability metric realized as maximum mean discrepancy, either

  linear: ||mean(A) - mean(B)||_2
  rbf:    sqrt(max(0, mean k(A,A) + mean k(B,B) - 2 mean k(A,B)))

with a Gaussian kernel k(x, y) = exp(-||x - y||^2 / h). The bandwidth h is
the median of pairwise squared distances over the pooled sample (held
fixed with respect to gradients).

The adversarial alternative scores groups with a softmax discriminator;
its population optimum assigns D_i(u) = p_i(u) / sum_k p_k(u), and the
optimal objective value is N * JSD - N * log N, which this module exposes
for diagnostics and tests.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T

D_FLOOR = 1e-12  # discriminator outputs are clamped here before log


# -- maximum mean discrepancy (numpy) ---------------------------------------


def _pooled_bandwidth(pooled: np.ndarray) -> float:
    n = pooled.shape[0]
    if n < 2:
        return 1.0
    sq = np.sum((pooled[:, None, :] - pooled[None, :, :]) ** 2, axis=2)
    h = float(np.median(sq[np.triu_indices(n, k=1)]))
    return h if h > 0.0 else 1.0


def ipm_distance(A: np.ndarray, B: np.ndarray, kind: str = "linear") -> float:
    """MMD between two sample groups, rows = points."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"group dims differ: {A.shape[1]} vs {B.shape[1]}")
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("ipm_distance needs non-empty groups")
    if kind == "linear":
        return float(np.linalg.norm(A.mean(axis=0) - B.mean(axis=0)))
    if kind == "rbf":
        h = _pooled_bandwidth(np.concatenate([A, B], axis=0))

        def kmean(X, Y):
            sq = (np.sum(X * X, axis=1)[:, None] + np.sum(Y * Y, axis=1)[None, :]
                  - 2.0 * X @ Y.T)
            return float(np.mean(np.exp(-sq / h)))

        mmd2 = kmean(A, A) + kmean(B, B) - 2.0 * kmean(A, B)
        return float(np.sqrt(max(mmd2, 0.0)))
    raise ValueError(f"unknown ipm kind {kind!r}")


# -- maximum mean discrepancy (graph nodes, for the training loss) -----------


def _row_mean(g: T.GradGraph, x: T.Node) -> T.Node:
    n = x.value.shape[0]
    ones = g.constant(np.full((1, n), 1.0 / n))
    return T.matmul(ones, x)


def _sq_dist(g: T.GradGraph, X: T.Node, Y: T.Node) -> T.Node:
    nx, ny = X.value.shape[0], Y.value.shape[0]
    x2 = T.matmul(T.elementwise_mul(X, X), g.constant(np.ones((X.value.shape[1], 1))))
    y2 = T.matmul(T.elementwise_mul(Y, Y), g.constant(np.ones((Y.value.shape[1], 1))))
    left = T.matmul(x2, g.constant(np.ones((1, ny))))
    right = T.matmul(g.constant(np.ones((nx, 1))), T.transpose(y2))
    cross = T.affine(T.matmul(X, T.transpose(Y)), -2.0)
    return T.add(T.add(left, right), cross)


def ipm_node(g: T.GradGraph, A: T.Node, B: T.Node, kind: str = "linear") -> T.Node:
    """Graph version of ipm_distance; bandwidth is baked from current values."""
    if kind == "linear":
        diff = T.add(_row_mean(g, A), T.affine(_row_mean(g, B), -1.0))
        return T.sqrt(T.reduce_sum(T.elementwise_mul(diff, diff)))
    if kind == "rbf":
        h = _pooled_bandwidth(np.concatenate([A.value, B.value], axis=0))
        kaa = T.reduce_mean(T.exp(T.affine(_sq_dist(g, A, A), -1.0 / h)))
        kbb = T.reduce_mean(T.exp(T.affine(_sq_dist(g, B, B), -1.0 / h)))
        kab = T.reduce_mean(T.exp(T.affine(_sq_dist(g, A, B), -1.0 / h)))
        return T.sqrt(T.add(T.add(kaa, kbb), T.affine(kab, -2.0)))
    raise ValueError(f"unknown ipm kind {kind!r}")


# -- pair selection ----------------------------------------------------------


def pair_importance(marginals: np.ndarray) -> list[tuple[int, int, float]]:
    """Unordered item pairs weighted by p(i) + p(i'); zero-mass items dropped."""
    p = np.asarray(marginals, dtype=np.float64)
    live = [int(i) for i in np.nonzero(p > 0.0)[0]]
    return [(i, j, float(p[i] + p[j]))
            for a, i in enumerate(live) for j in live[a + 1:]]

def select_clip(pairs, k1: int):
    """Top-k1 pairs by weight; ties broken lexicographically by (i, i')."""
    ranked = sorted(pairs, key=lambda t: (-t[2], t[0], t[1]))
    return ranked[:k1]


def select_sample(pairs, k2: int, rng: np.random.Generator):
    """k2 draws without replacement, each proportional to the remaining weights."""
    pool = list(pairs)
    out = []
    for _ in range(min(k2, len(pool))):
        w = np.array([t[2] for t in pool])
        idx = int(rng.choice(len(pool), p=w / w.sum()))
        out.append(pool.pop(idx))
    return out


# -- penalties over a batch ---------------------------------------------------


def group_rows(item_ids: np.ndarray) -> dict[int, np.ndarray]:
    item_ids = np.asarray(item_ids)
    return {int(i): np.nonzero(item_ids == i)[0] for i in np.unique(item_ids)}


def balance_penalty_node(g: T.GradGraph, phi: T.Node, item_ids, pairs,
                         kind: str = "linear") -> T.Node:
    """Sum of weight * IPM over selected pairs with both groups in the batch."""
    rows = group_rows(item_ids)
    total = None
    for i, j, w in pairs:
        if i not in rows or j not in rows:
            continue
        A = T.embed_lookup(phi, rows[i])
        B = T.embed_lookup(phi, rows[j])
        term = T.affine(ipm_node(g, A, B, kind), w)
        total = term if total is None else T.add(total, term)
    if total is None:
        total = g.constant(0.0)
    return total


def balance_penalty(phi_values: np.ndarray, item_ids, pairs, kind: str = "linear") -> float:
    rows = group_rows(item_ids)
    out = 0.0
    for i, j, w in pairs:
        if i in rows and j in rows:
            out += w * ipm_distance(phi_values[rows[i]], phi_values[rows[j]], kind)
    return out


def adversarial_term_node(g: T.GradGraph, d_probs: T.Node, item_ids,
                          estimator: str = "per_pair") -> T.Node:
    """Discriminator score of the batch: aggregate of log D^{i_t}(phi(u_t)).

    per_pair averages over batch rows; per_item averages within each
    observed item group and sums the group means.
    """
    item_ids = np.asarray(item_ids, dtype=np.int64)
    n, num_items = d_probs.value.shape
    onehot = np.zeros((n, num_items))
    onehot[np.arange(n), item_ids] = 1.0
    picked = T.matmul(T.elementwise_mul(d_probs, g.constant(onehot)),
                      g.constant(np.ones((num_items, 1))))
    logs = T.log(T.clamp(picked, D_FLOOR, 2.0))
    if estimator == "per_pair":
        return T.reduce_mean(logs)
    if estimator == "per_item":
        counts = np.bincount(item_ids, minlength=num_items).astype(np.float64)
        weights = (1.0 / counts[item_ids]).reshape(-1, 1)
        return T.reduce_sum(T.elementwise_mul(logs, g.constant(weights)))
    raise ValueError(f"unknown estimator {estimator!r}")


# -- Jensen-Shannon diagnostics ----------------------------------------------


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0.0]
    return float(-np.sum(p * np.log(p)))


def jsd_discrete(dists: np.ndarray) -> float:
    """Uniform-weight JSD of N discrete distributions (rows), natural log."""
    dists = np.asarray(dists, dtype=np.float64)
    mean = dists.mean(axis=0)
    return _entropy(mean) - float(np.mean([_entropy(row) for row in dists]))


def jsd_diagnostic(groups, bins: int = 20) -> float:
    """JSD between per-item groups of representation vectors.

    Each coordinate is histogrammed on bins shared across groups (pooled
    min to pooled max); the result is the mean over coordinates of the
    per-coordinate discrete JSD. Zero iff all groups have identical
    histograms in every coordinate.
    """
    groups = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in groups]
    if len(groups) < 2:
        raise ValueError("jsd_diagnostic needs at least two groups")
    dim = groups[0].shape[1]
    pooled = np.concatenate(groups, axis=0)
    total = 0.0
    for d in range(dim):
        lo, hi = float(pooled[:, d].min()), float(pooled[:, d].max())
        if hi - lo < 1e-300:
            continue  # every point identical in this coordinate
        hists = []
        for gr in groups:
            counts, _ = np.histogram(gr[:, d], bins=bins, range=(lo, hi))
            hists.append(counts / counts.sum())
        total += jsd_discrete(np.array(hists))
    return total / dim


# -- optimal discriminator (closed form) --------------------------------------


def optimal_discriminator(dists: np.ndarray) -> np.ndarray:
    """Constrained optimum of the group-identification objective.

    dists: (N, S) row-stochastic matrix of N group distributions over S
    support points. Returns D with D[i, t] = p_i(t) / sum_k p_k(t);
    columns with no mass get the uniform assignment.
    """
    p = np.asarray(dists, dtype=np.float64)
    col = p.sum(axis=0)
    D = np.where(col > 0.0, p / np.where(col > 0.0, col, 1.0), 1.0 / p.shape[0])
    return D


def adversary_value(dists: np.ndarray, D: np.ndarray) -> float:
    """sum_i E_{t~p_i}[log D_i(t)] with the usual 0 log 0 = 0 convention."""
    p = np.asarray(dists, dtype=np.float64)
    logs = np.log(np.clip(D, D_FLOOR, None))
    return float(np.sum(np.where(p > 0.0, p * logs, 0.0)))


def optimal_adversary_value(dists: np.ndarray) -> float:
    """Closed form N * JSD - N * log N of the optimum; >= -N log N always."""
    p = np.asarray(dists, dtype=np.float64)
    n = p.shape[0]
    return n * jsd_discrete(p) - n * float(np.log(n))
