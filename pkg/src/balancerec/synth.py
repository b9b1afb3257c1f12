"""Synthetic biased-feedback generator.

Users and items carry Gaussian feature vectors; each user also has a
scalar latent trait z shared by their exposure and feedback draws. The
exposure score of item j for user i is

    r_ij = 1 - sigmoid((1-alpha)(1-beta) * a.k1(k2([p_i, q_j]))
                       + alpha + beta * z + eps),   eps ~ N(0, noise_std^2)

so alpha=1 gives uniform random exposure and alpha=0 maximally
feature-driven exposure; beta routes the latent trait into both exposure
and feedback. Items are exposed by sweeping them in random order and
drawing Bernoulli(r_ij) until list_len are accepted (capped sweeps, then
a highest-score fill). Feedback is

    s_ij = 1 if sigmoid(x1 + x1*x2) + beta * z - 0.5 > 0 else 0
    x1 = a.k1(k2([p_i, q_j])) + b,  x2 = a.k3(k2([-p_i, -q_j])) + b

with a the all-ones vector. Note k3 of a k2 output is identically zero
(k2 is non-negative and k3 vanishes on non-negatives), so x2 equals b;
both are kept as written for fidelity to the construction.

Exposed pairs become train/val records with the realized r_ij stored as
the true propensity; the test set labels items drawn uniformly from each
user's unexposed items. Every per-user draw uses an RNG stream derived
from (seed, user id), so generation is reproducible and order-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DatasetBundle, InteractionLog

SQRT_002 = 0.1414213562373095  # sqrt(0.02)


@dataclass
class SynthConfig:
    num_users: int = 10000
    num_items: int = 32
    feature_dim: int = 8
    alpha: float = 0.5
    beta: float = 0.5
    list_len: int = 5
    noise_std: float = SQRT_002
    bias_b: float = 0.0
    uniform_test_len: int | None = None  # per-user test size; defaults to list_len
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if self.list_len > self.num_items:
            raise ValueError("list_len cannot exceed num_items")
        test_len = self.uniform_test_len if self.uniform_test_len is not None else self.list_len
        if test_len > self.num_items - self.list_len:
            raise ValueError("uniform test needs enough unexposed items per user")


def kappa1(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, x - 0.5, 0.0)


def kappa2(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, x, 0.0)


def kappa3(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < 0.0, x + 0.5, 0.0)


def feature_score(p, q) -> np.ndarray:
    """a^T k1(k2([p, q])) for one user against one or many items."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    stacked = np.concatenate([np.broadcast_to(p, (q.shape[0], len(p))), q], axis=1)
    return kappa1(kappa2(stacked)).sum(axis=1)


def exposure_score(p, q, z: float, eps, alpha: float, beta: float) -> np.ndarray:
    """Bernoulli mean r_ij of exposing item(s) q to user p."""
    arg = (1.0 - alpha) * (1.0 - beta) * feature_score(p, q) + alpha + beta * z + eps
    return 1.0 - 1.0 / (1.0 + np.exp(-arg))


def feedback(p, q, z: float, beta: float, b: float = 0.0) -> np.ndarray:
    """Binary relevance of item(s) q for user p given trait z."""
    q2 = np.atleast_2d(np.asarray(q, dtype=np.float64))
    x1 = feature_score(p, q2) + b
    neg = np.concatenate([np.broadcast_to(-np.asarray(p), (q2.shape[0], len(p))), -q2], axis=1)
    x2 = kappa3(kappa2(neg)).sum(axis=1) + b
    score = 1.0 / (1.0 + np.exp(-(x1 + x1 * x2))) + beta * z - 0.5
    return (score > 0.0).astype(np.int64)


def expose_items(r_row: np.ndarray, list_len: int, rng: np.random.Generator,
                 max_sweeps: int = 50) -> np.ndarray:
    """Accept list_len distinct items by Bernoulli sweeps in random order.

    After max_sweeps the list is filled with the highest-score unexposed
    items, ties broken by ascending item id.
    """
    n = len(r_row)
    accepted: list[int] = []
    taken = np.zeros(n, dtype=bool)
    for _ in range(max_sweeps):
        for j in rng.permutation(n):
            if taken[j]:
                continue
            if rng.random() < r_row[j]:
                accepted.append(int(j))
                taken[j] = True
                if len(accepted) == list_len:
                    return np.array(accepted, dtype=np.int64)
    rest = np.nonzero(~taken)[0]
    order = rest[np.lexsort((rest, -r_row[rest]))]
    accepted.extend(int(j) for j in order[: list_len - len(accepted)])
    return np.array(accepted, dtype=np.int64)


def _user_rng(seed: int, user: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, user])


def generate(cfg: SynthConfig) -> DatasetBundle:
    """Build a biased train/val split plus a uniform test split.

    Exposed items (with feedback labels and realized propensities) are
    split per user into train and val; the test set draws items uniformly
    without replacement from the user's unexposed items so the splits
    stay disjoint.
    """
    rng_items = np.random.default_rng([cfg.seed, 0])
    item_feats = rng_items.normal(size=(cfg.num_items, cfg.feature_dim))
    user_feats = np.empty((cfg.num_users, cfg.feature_dim))
    test_len = cfg.uniform_test_len if cfg.uniform_test_len is not None else cfg.list_len
    n_val = int(round(cfg.list_len * cfg.val_fraction))
    n_val = min(n_val, cfg.list_len - 1)  # keep at least one train record per user

    tr, va, te = ([], [], []), ([], [], []), ([], [], [])  # users, items, labels
    tr_prop, va_prop = [], []
    propensities = np.empty((cfg.num_users, cfg.num_items))

    for u in range(cfg.num_users):
        rng = _user_rng(cfg.seed, u)
        p = rng.normal(size=cfg.feature_dim)
        z = float(rng.normal())
        eps = rng.normal(0.0, cfg.noise_std, size=cfg.num_items)
        user_feats[u] = p
        r = exposure_score(p, item_feats, z, eps, cfg.alpha, cfg.beta)
        propensities[u] = r

        exposed = expose_items(r, cfg.list_len, rng)
        labels = feedback(p, item_feats[exposed], z, cfg.beta, cfg.bias_b)
        perm = rng.permutation(cfg.list_len)
        val_rows = set(perm[:n_val].tolist())
        for k, (j, y) in enumerate(zip(exposed, labels)):
            dest, props = (va, va_prop) if k in val_rows else (tr, tr_prop)
            dest[0].append(u)
            dest[1].append(int(j))
            dest[2].append(int(y))
            props.append(float(r[j]))

        unexposed = np.setdiff1d(np.arange(cfg.num_items), exposed)
        picked = rng.choice(unexposed, size=test_len, replace=False)
        te_labels = feedback(p, item_feats[picked], z, cfg.beta, cfg.bias_b)
        te[0].extend(int(u) for _ in picked)
        te[1].extend(int(j) for j in picked)
        te[2].extend(int(y) for y in te_labels)

    def mklog(cols, props=None):
        return InteractionLog(
            np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=np.int64),
            np.array(cols[2], dtype=np.int64),
            np.array(props, dtype=np.float64) if props is not None else None,
            num_users=cfg.num_users, num_items=cfg.num_items)

    return DatasetBundle(
        train=mklog(tr, tr_prop), val=mklog(va, va_prop), test=mklog(te),
        num_users=cfg.num_users, num_items=cfg.num_items,
        user_features=user_feats, item_features=item_feats,
        true_propensities=propensities,
        meta={"generator": "synthetic", "alpha": cfg.alpha, "beta": cfg.beta,
              "seed": cfg.seed})
