"""Interaction logs, TSV round trips and per-user splitting.

On-disk format is header-less TSV: `user<TAB>item<TAB>label` with an
optional fourth propensity column. Ids in files can be arbitrary
integers; loading re-indexes them densely (sorted ascending) and keeps
the original ids so exports are faithful. Feature files are
`id<TAB>v1,v2,...,vd` with comma-separated float64 components.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class InteractionLog:
    """Aligned record arrays with dense user/item ids."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    propensities: np.ndarray | None = None
    num_users: int = 0
    num_items: int = 0
    orig_users: np.ndarray | None = None  # dense id -> original id
    orig_items: np.ndarray | None = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.propensities is not None:
            self.propensities = np.asarray(self.propensities, dtype=np.float64)
        if not (len(self.users) == len(self.items) == len(self.labels)):
            raise ValueError("users, items and labels must be aligned")
        if self.num_users == 0 and len(self.users):
            self.num_users = int(self.users.max()) + 1
        if self.num_items == 0 and len(self.items):
            self.num_items = int(self.items.max()) + 1

    def __len__(self):
        return len(self.users)

    def take(self, idx) -> "InteractionLog":
        idx = np.asarray(idx, dtype=np.int64)
        return InteractionLog(
            self.users[idx], self.items[idx], self.labels[idx],
            None if self.propensities is None else self.propensities[idx],
            num_users=self.num_users, num_items=self.num_items,
            orig_users=self.orig_users, orig_items=self.orig_items)


@dataclass
class DatasetBundle:
    train: InteractionLog
    val: InteractionLog
    test: InteractionLog
    num_users: int
    num_items: int
    user_features: np.ndarray | None = None
    item_features: np.ndarray | None = None
    true_propensities: np.ndarray | None = None  # (num_users, num_items)
    meta: dict = field(default_factory=dict)


def load_interactions(path) -> InteractionLog:
    """Load a TSV log; rejects malformed rows and duplicate (user, item) pairs."""
    users, items, labels, props = [], [], [], []
    ncols = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if ncols is None:
                if len(parts) not in (3, 4):
                    raise ValueError(f"{path}:{lineno}: expected 3 or 4 columns, got {len(parts)}")
                ncols = len(parts)
            elif len(parts) != ncols:
                raise ValueError(f"{path}:{lineno}: inconsistent column count")
            try:
                u, i, y = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: non-integer id or label") from e
            if y not in (0, 1):
                raise ValueError(f"{path}:{lineno}: label must be 0 or 1, got {y}")
            users.append(u)
            items.append(i)
            labels.append(y)
            if ncols == 4:
                p = float(parts[3])
                if not (p > 0.0):
                    raise ValueError(f"{path}:{lineno}: propensity must be positive")
                props.append(p)
    users = np.array(users, dtype=np.int64)
    items = np.array(items, dtype=np.int64)
    uniq_u, dense_u = np.unique(users, return_inverse=True)
    uniq_i, dense_i = np.unique(items, return_inverse=True)
    pair_keys = dense_u.astype(np.int64) * len(uniq_i) + dense_i
    if len(pair_keys) != len(np.unique(pair_keys)):
        raise ValueError(f"{path}: duplicate (user, item) pair")
    return InteractionLog(
        dense_u, dense_i, np.array(labels, dtype=np.int64),
        np.array(props, dtype=np.float64) if props else None,
        num_users=len(uniq_u), num_items=len(uniq_i),
        orig_users=uniq_u, orig_items=uniq_i)


def save_interactions(log: InteractionLog, path) -> None:
    """Write TSV using original ids when the log carries a mapping."""
    ou = log.orig_users if log.orig_users is not None else np.arange(log.num_users)
    oi = log.orig_items if log.orig_items is not None else np.arange(log.num_items)
    with open(path, "w") as fh:
        for t in range(len(log)):
            row = f"{ou[log.users[t]]}\t{oi[log.items[t]]}\t{log.labels[t]}"
            if log.propensities is not None:
                row += f"\t{float(log.propensities[t])!r}"
            fh.write(row + "\n")


def load_features(path) -> tuple[np.ndarray, np.ndarray]:
    """Feature file -> (ids, matrix) with rows ordered as in the file."""
    ids, rows = [], []
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected id<TAB>v1,v2,...")
            vec = np.array([float(v) for v in parts[1].split(",")], dtype=np.float64)
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ValueError(f"{path}:{lineno}: inconsistent feature dimension")
            ids.append(int(parts[0]))
            rows.append(vec)
    return np.array(ids, dtype=np.int64), np.array(rows)


def save_features(ids, matrix, path) -> None:
    with open(path, "w") as fh:
        for i, row in zip(ids, np.asarray(matrix)):
            fh.write(f"{int(i)}\t" + ",".join(repr(float(v)) for v in row) + "\n")


def split_by_user(log: InteractionLog, ratios=(0.7, 0.1, 0.2), seed: int = 0):
    """Per-user shuffle and partition into (train, val, test).

    Users with fewer than 3 records contribute everything to train. Val
    and test sizes are rounded per user; train takes the remainder and is
    kept non-empty.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be three non-negatives summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    tr_idx, va_idx, te_idx = [], [], []
    order = np.argsort(log.users, kind="stable")
    bounds = np.searchsorted(log.users[order], np.arange(log.num_users + 1))
    for u in range(log.num_users):
        rows = order[bounds[u]:bounds[u + 1]]
        n = len(rows)
        if n == 0:
            continue
        if n < 3:
            tr_idx.extend(rows)
            continue
        rows = rows[rng.permutation(n)]
        n_val = int(round(n * ratios[1]))
        n_test = int(round(n * ratios[2]))
        while n - n_val - n_test < 1:
            if n_val > 0:
                n_val -= 1
            else:
                n_test -= 1
        tr_idx.extend(rows[: n - n_val - n_test])
        va_idx.extend(rows[n - n_val - n_test: n - n_test])
        te_idx.extend(rows[n - n_test:])
    return log.take(tr_idx), log.take(va_idx), log.take(te_idx)


def item_marginals(log: InteractionLog, num_items: int | None = None) -> np.ndarray:
    """Empirical exposure distribution over items; sums to 1 on non-empty logs."""
    n = num_items if num_items is not None else log.num_items
    counts = np.bincount(log.items, minlength=n).astype(np.float64)
    total = counts.sum()
    return counts / total if total > 0 else counts


def resample_uniform_test(log: InteractionLog, seed: int = 0) -> InteractionLog:
    """Thin a biased test log toward uniform item frequencies.

    Records are kept with probability min_freq / freq(item), so every
    item's expected retained count equals the rarest item's count. An
    already-uniform log is returned unchanged.
    """
    if len(log) == 0:
        return log
    counts = np.bincount(log.items, minlength=log.num_items)
    min_present = counts[counts > 0].min()
    keep_p = min_present / np.maximum(counts, 1)
    rng = np.random.default_rng(seed)
    keep = rng.random(len(log)) < keep_p[log.items]
    return log.take(np.nonzero(keep)[0])


def export_splits(train: InteractionLog, val: InteractionLog, test: InteractionLog,
                  prefix) -> list[str]:
    paths = [f"{prefix}.train", f"{prefix}.val", f"{prefix}.test"]
    for log, path in zip((train, val, test), paths):
        save_interactions(log, path)
    return paths


def load_splits(train_path, val_path, test_path) -> DatasetBundle:
    """Load three TSV logs into one bundle with a shared dense id space.

    Each file is validated independently, then ids are re-indexed against
    the union of original ids so a user keeps one dense id across splits.
    """
    logs = [load_interactions(p) for p in (train_path, val_path, test_path)]
    all_users = np.union1d(np.union1d(logs[0].orig_users, logs[1].orig_users),
                           logs[2].orig_users)
    all_items = np.union1d(np.union1d(logs[0].orig_items, logs[1].orig_items),
                           logs[2].orig_items)
    remapped = []
    for log in logs:
        remapped.append(InteractionLog(
            np.searchsorted(all_users, log.orig_users[log.users]),
            np.searchsorted(all_items, log.orig_items[log.items]),
            log.labels, log.propensities,
            num_users=len(all_users), num_items=len(all_items),
            orig_users=all_users, orig_items=all_items))
    return DatasetBundle(train=remapped[0], val=remapped[1], test=remapped[2],
                         num_users=len(all_users), num_items=len(all_items))
