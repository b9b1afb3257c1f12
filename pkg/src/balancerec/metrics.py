"""Ranking and classification metrics under a full-ranking protocol.

Per-list primitives operate on one user's candidate scores; `evaluate`
applies them across users with the candidate set equal to all items the
user did not interact with in train (which includes their test items).
Ranking ties are broken by ascending item id so results are exactly
reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import models as M
from .data import InteractionLog


def topk(scores: np.ndarray, k: int, item_ids=None) -> np.ndarray:
    """Ids of the k highest-scoring items, ties by ascending item id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(len(scores)) if item_ids is None else np.asarray(item_ids)
    order = np.lexsort((ids, -scores))
    return ids[order[:k]]


def ndcg_at_k(scores, labels, k: int = 10) -> float:
    """DCG of relevant items in the top k over the ideal DCG.

    Users with no relevant item yield 0; gains are binary with the
    1/log2(rank+1) discount.
    """
    labels = np.asarray(labels)
    n_rel = int(labels.sum())
    if n_rel == 0:
        return 0.0
    ranked = topk(scores, k)
    gains = labels[ranked]
    ranks = np.arange(1, len(ranked) + 1)
    dcg = float(np.sum(gains / np.log2(ranks + 1)))
    ideal_ranks = np.arange(1, min(n_rel, k) + 1)
    idcg = float(np.sum(1.0 / np.log2(ideal_ranks + 1)))
    return dcg / idcg


def recall_at_k(scores, labels, k: int = 10) -> float:
    """Fraction of relevant items that appear in the top k."""
    labels = np.asarray(labels)
    n_rel = int(labels.sum())
    if n_rel == 0:
        return 0.0
    ranked = topk(scores, k)
    return float(labels[ranked].sum()) / n_rel


def auc(scores, labels) -> float | None:
    """Pairwise AUC with 0.5 for score ties; None without both classes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        return None
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (len(pos) * len(neg)))


def acc(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of records where (score >= threshold) matches the label."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    return float(np.mean((scores >= threshold).astype(int) == labels))


@dataclass
class MetricsReport:
    ndcg_at_10: float
    recall_at_10: float
    auc: float
    acc: float
    num_test_users: int
    num_test_records: int
    seed: int = 0
    config_hash: str = ""

    _ORDER = ("ndcg_at_10", "recall_at_10", "auc", "acc",
              "num_test_users", "num_test_records", "seed", "config_hash")

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in self._ORDER})

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def evaluate(bundle: M.ModelBundle, train: InteractionLog, test: InteractionLog,
             use_confounder: bool, k: int = 10, seed: int = 0,
             config_hash: str = "") -> MetricsReport:
    """Score every test user's candidates and aggregate the four metrics.

    Candidates per user are all items absent from their train records.
    NDCG/Recall average over test users with at least one relevant item;
    AUC averages per-user pair counts over users with both classes among
    their test records (when no user qualifies, for instance on one-record
    validation splits, a pooled AUC over all records is reported); ACC
    pools all test records.
    """
    num_items = bundle.dims.num_items
    test_users = np.unique(test.users)
    if len(test_users) == 0:
        return MetricsReport(0.0, 0.0, 0.0, 0.0, 0, 0, seed, config_hash)

    pair_users = np.repeat(test_users, num_items)
    pair_items = np.tile(np.arange(num_items), len(test_users))
    scores = M.score_matrix(bundle, pair_users, pair_items, use_confounder)
    score_rows = {int(u): scores[r * num_items:(r + 1) * num_items]
                  for r, u in enumerate(test_users)}

    train_sets: dict[int, set] = {}
    for u, i in zip(train.users, train.items):
        train_sets.setdefault(int(u), set()).add(int(i))
    test_items: dict[int, list] = {}
    for u, i, y in zip(test.users, test.items, test.labels):
        test_items.setdefault(int(u), []).append((int(i), int(y)))

    ndcgs, recalls, aucs = [], [], []
    acc_hits = 0
    for u in test_users:
        u = int(u)
        row = score_rows[u]
        pairs = test_items[u]
        rel = {i for i, y in pairs if y == 1}
        # setdiff1d returns sorted ids, so positional tie-breaks equal id tie-breaks
        cand = np.setdiff1d(np.arange(num_items),
                            np.fromiter(train_sets.get(u, set()), dtype=int))
        if rel:
            cand_labels = np.isin(cand, sorted(rel)).astype(int)
            ndcgs.append(ndcg_at_k(row[cand], cand_labels, k))
            recalls.append(recall_at_k(row[cand], cand_labels, k))
        rec_items = np.array([i for i, _ in pairs])
        rec_labels = np.array([y for _, y in pairs])
        rec_scores = row[rec_items]
        a = auc(rec_scores, rec_labels)
        if a is not None:
            aucs.append(a)
        acc_hits += int(np.sum((rec_scores >= 0.5).astype(int) == rec_labels))

    if aucs:
        auc_value = float(np.mean(aucs))
    else:
        pooled_scores = np.concatenate([score_rows[int(u)][test.items[test.users == u]]
                                        for u in test_users])
        pooled = auc(pooled_scores, test.labels[np.argsort(test.users, kind="stable")])
        auc_value = pooled if pooled is not None else 0.0

    n_records = len(test)
    return MetricsReport(
        ndcg_at_10=float(np.mean(ndcgs)) if ndcgs else 0.0,
        recall_at_10=float(np.mean(recalls)) if recalls else 0.0,
        auc=auc_value,
        acc=acc_hits / n_records if n_records else 0.0,
        num_test_users=len(test_users),
        num_test_records=n_records,
        seed=seed,
        config_hash=config_hash)
