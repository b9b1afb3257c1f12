"""Alternating minimax training loop with early stopping.

Each epoch reshuffles minibatches with a seeded stream. Adversarial
methods first freeze everything but the discriminator and run e_disc
ascent passes over the batches, then freeze the discriminator and run
e_gen descent passes over the generator groups. Non-adversarial methods
run only the descent passes, so with e_gen=1 the loop is a plain epoch.

fit() treats the incoming bundle as freshly initialized: adversarial
methods overwrite the user-embedding rows of users present in the train
log with their signed interaction rows (seeded orthonormal projection to
the embedding width), so the representation starts out exposure-coded
and the minimax phase is responsible for stripping whatever the
discriminator can exploit; the logged jsd diagnostic tracks that removal.

Gradients are clipped to a global L2 norm per step. Validation runs
after every epoch; the best checkpoint by the validation metric is kept
and training stops after `patience` epochs without improvement. A
non-finite loss aborts the run and restores the last finite best.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import balancing as B
from . import metrics as E
from . import models as M
from . import objectives as O
from . import tensor as T
from .data import DatasetBundle, item_marginals

LOG_COLUMNS = ("epoch", "train_loss", "disc_objective", "balance_diag",
               "val_auc", "val_ndcg", "wall_ms")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 512
    lr_gen: float = 0.005
    lr_disc: float = 0.02
    optimizer: str = "adam"  # adam | sgd
    e_disc: int = 5
    e_gen: int = 1
    patience: int = 10
    grad_clip: float = 10.0
    val_metric: str = "auc"  # auc | ndcg
    seed: int = 0
    imputation_epochs: int = 20
    jsd_bins: int = 20

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.val_metric not in ("auc", "ndcg"):
            raise ValueError(f"unknown validation metric {self.val_metric!r}")


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict, ascend: bool = False):
        sign = 1.0 if ascend else -1.0
        for name, g in grads.items():
            params[name] += sign * self.lr * g


class Adam:
    """Adam with the standard bias correction (b1=0.9, b2=0.999, eps=1e-8)."""

    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, ascend: bool = False):
        self.t += 1
        sign = 1.0 if ascend else -1.0
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m[...] = self.b1 * m + (1.0 - self.b1) * g
            v[...] = self.b2 * v + (1.0 - self.b2) * g * g
            m_hat = m / (1.0 - self.b1 ** self.t)
            v_hat = v / (1.0 - self.b2 ** self.t)
            params[name] += sign * self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, lr: float):
    return Adam(lr) if kind == "adam" else SGD(lr)


def clip_gradients(grads: dict, max_norm: float) -> dict:
    """Scale the whole gradient set so its global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        return {k: g * scale for k, g in grads.items()}
    return grads


@dataclass
class TrainResult:
    bundle: M.ModelBundle
    log: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = -np.inf
    diverged: bool = False
    jsd_init: float | None = None
    jsd_best: float | None = None


def record_weights(dataset: DatasetBundle, loss_cfg: O.LossConfig,
                   marginals: np.ndarray, train_cfg: TrainConfig) -> np.ndarray | None:
    """Per-train-record loss weights for the chosen method.

    Reweighted baselines use inverse propensities from the configured
    source; balanced methods use inverse item exposure marginals as in
    the balanced risk. The plain, direct and imputation objectives are
    unweighted (direct) or unweighted-plus-grid (handled elsewhere).
    """
    method = loss_cfg.method
    train = dataset.train
    if method in ("base", "direct"):
        return None
    if method in ("ips", "snips", "dr"):
        src = loss_cfg.propensity_source
        if src == "true":
            if train.propensities is None:
                raise ValueError("propensity_source='true' needs a propensity column")
            p = train.propensities
        elif src == "item_marginal":
            p = marginals[train.items]
        else:
            p = _estimated_propensities(dataset, train_cfg)
        return 1.0 / np.clip(p, 1e-6, None)
    # balanced methods weight by the item exposure marginal
    return 1.0 / np.clip(marginals[train.items], 1e-6, None)


def _estimated_propensities(dataset: DatasetBundle, train_cfg: TrainConfig) -> np.ndarray:
    """Fit the exposure net on observed-vs-unobserved pairs, then score train.

    Positives are the observed train pairs; negatives are an equal-sized
    uniform draw of unobserved pairs. The net is the same architecture as
    the exposure-likelihood component with a zero confounder.
    """
    train = dataset.train
    rng = np.random.default_rng([train_cfg.seed, 4])
    dims = M.ModelDims(num_users=dataset.num_users, num_items=dataset.num_items,
                       embed_dim=16, conf_dim=4)
    net = M.init_bundle("gmf", dims, seed=train_cfg.seed + 7)
    observed = set(zip(train.users.tolist(), train.items.tolist()))
    n = len(train)
    neg_u, neg_i = [], []
    while len(neg_u) < n:
        u = int(rng.integers(dataset.num_users))
        i = int(rng.integers(dataset.num_items))
        if (u, i) not in observed:
            neg_u.append(u)
            neg_i.append(i)
    users = np.concatenate([train.users, np.array(neg_u)])
    items = np.concatenate([train.items, np.array(neg_i)])
    targets = np.concatenate([np.ones(n), np.zeros(n)])
    opt = make_optimizer(train_cfg.optimizer, train_cfg.lr_gen)
    for _ in range(train_cfg.imputation_epochs):
        order = rng.permutation(len(users))
        for lo in range(0, len(order), train_cfg.batch_size):
            idx = order[lo: lo + train_cfg.batch_size]
            g = T.GradGraph()
            nodes = net.mount(g, trainable=frozenset({"emb", "c", "s"}))
            u_rep = M.user_repr(nodes, users[idx])
            i_rep = M.item_repr(nodes, items[idx])
            z = M.infer_confounder(nodes, u_rep, i_rep)
            ps = M.exposure_prob(nodes, u_rep, i_rep, z)
            loss = T.reduce_mean(O._ce_node(g, ps, targets[idx]))
            grads = g.backward(loss)
            named = {n_: grads[node.idx] for n_, node in nodes.items() if node.trainable}
            opt.step(net.params, clip_gradients(named, train_cfg.grad_clip))
    g = T.GradGraph()
    nodes = net.mount(g, trainable=frozenset())
    u_rep = M.user_repr(nodes, train.users)
    i_rep = M.item_repr(nodes, train.items)
    z = M.infer_confounder(nodes, u_rep, i_rep)
    ps = M.exposure_prob(nodes, u_rep, i_rep, z)
    return np.clip(ps.value[:, 0], 1e-3, 1.0)


def warm_start_embeddings(bundle: M.ModelBundle, train, seed: int) -> None:
    """Overwrite user-embedding rows with signed interaction rows.

    Each observed user's row becomes the sum of orthonormal item vectors
    signed by the label, rescaled to the std of the incoming embedding,
    so the representation starts out maximally exposure-identifying.
    Users without train records keep their rows. The projection basis is
    seeded; rows orthonormal when the embedding is wider than the item
    count, columns orthonormal otherwise.
    """
    emb = bundle.params["emb.user"]
    num_items = bundle.dims.num_items
    width = emb.shape[1]
    rng = np.random.default_rng([seed, 6])
    gauss = rng.normal(size=(num_items, width))
    if num_items >= width:
        basis = np.linalg.qr(gauss)[0]
    else:
        basis = np.linalg.qr(gauss.T)[0].T
    warm = np.zeros_like(emb)
    signs = 2.0 * train.labels.astype(np.float64) - 1.0
    np.add.at(warm, train.users, basis[train.items] * signs[:, None])
    seen = np.zeros(len(emb), dtype=bool)
    seen[train.users] = True
    spread = warm[seen].std()
    if spread > 0.0:
        emb[seen] = warm[seen] * (emb.std() / spread)


def _pretrain_imputation(bundle_kind, dims, dataset, loss_cfg, train_cfg) -> M.ModelBundle:
    """Plain-loss model of the same architecture, fixed-epoch pretraining."""
    imp = M.init_bundle(bundle_kind, dims, seed=train_cfg.seed + 1)
    cfg = replace(loss_cfg, method="base")
    rng = np.random.default_rng([train_cfg.seed, 3])
    opt = make_optimizer(train_cfg.optimizer, train_cfg.lr_gen)
    train = dataset.train
    for _ in range(train_cfg.imputation_epochs):
        order = rng.permutation(len(train))
        for lo in range(0, len(order), train_cfg.batch_size):
            idx = order[lo: lo + train_cfg.batch_size]
            g = T.GradGraph()
            nodes = imp.mount(g, trainable=O.generator_groups(cfg))
            loss, _ = O.loss_base(g, imp, nodes, train.users[idx], train.items[idx],
                                  train.labels[idx], cfg)
            grads = g.backward(loss)
            named = {n_: grads[node.idx] for n_, node in nodes.items() if node.trainable}
            opt.step(imp.params, clip_gradients(named, train_cfg.grad_clip))
    return imp


def _named_grads(nodes, grads):
    return {name: grads[node.idx] for name, node in nodes.items() if node.trainable}


def fit(bundle: M.ModelBundle, dataset: DatasetBundle, loss_cfg: O.LossConfig,
        train_cfg: TrainConfig) -> TrainResult:
    """Train in place and return the best checkpoint plus the epoch log."""
    train, val = dataset.train, dataset.val
    n = len(train)
    marginals = item_marginals(train, dataset.num_items)
    weights = record_weights(dataset, loss_cfg, marginals, train_cfg)
    adversarial = loss_cfg.method in O.ADVERSARIAL
    use_conf = loss_cfg.uses_confounder
    if adversarial and n:
        warm_start_embeddings(bundle, train, train_cfg.seed)

    all_pairs = B.pair_importance(marginals)
    clip_pairs = B.select_clip(all_pairs, loss_cfg.k1) if loss_cfg.method == "cbr_clip" else None

    imputation = None
    if loss_cfg.method in ("direct", "dr"):
        imputation = _pretrain_imputation(bundle.kind, bundle.dims, dataset,
                                          loss_cfg, train_cfg)

    rng = np.random.default_rng([train_cfg.seed, 2])
    opt_gen = make_optimizer(train_cfg.optimizer, train_cfg.lr_gen)
    opt_disc = make_optimizer(train_cfg.optimizer, train_cfg.lr_disc)
    gen_groups = O.generator_groups(loss_cfg)

    result = TrainResult(bundle=bundle.copy())
    if adversarial:
        phi0 = M.phi_matrix(bundle, train.users, train.items, use_conf)
        groups0 = [phi0[rows] for rows in B.group_rows(train.items).values()
                   if len(rows) > 0]
        result.jsd_init = B.jsd_diagnostic(groups0, bins=train_cfg.jsd_bins) \
            if len(groups0) >= 2 else 0.0

    stale = 0
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        batches = [order[lo: lo + train_cfg.batch_size]
                   for lo in range(0, n, train_cfg.batch_size)]
        epoch_pairs = clip_pairs
        if loss_cfg.method == "cbr_sample":
            epoch_pairs = B.select_sample(all_pairs, loss_cfg.k2, rng)

        disc_vals, gen_vals, diag_vals = [], [], []
        try:
            if adversarial:
                # discriminator ascent with phi/c frozen at their epoch snapshot
                for _ in range(train_cfg.e_disc):
                    for idx in batches:
                        g = T.GradGraph()
                        nodes = bundle.mount(g, trainable=M.DISC_GROUPS)
                        obj = O.discriminator_objective(
                            g, bundle, nodes, train.users[idx], train.items[idx], loss_cfg)
                        grads = _named_grads(nodes, g.backward(obj))
                        opt_disc.step(bundle.params,
                                      clip_gradients(grads, train_cfg.grad_clip),
                                      ascend=True)
                        disc_vals.append(float(obj.value))
            # generator descent with the discriminator frozen
            for _ in range(train_cfg.e_gen):
                for idx in batches:
                    g = T.GradGraph()
                    nodes = bundle.mount(g, trainable=gen_groups)
                    args = (g, bundle, nodes, train.users[idx], train.items[idx],
                            train.labels[idx], loss_cfg)
                    w = None if weights is None else weights[idx]
                    if loss_cfg.method == "base":
                        loss, diag = O.loss_base(*args)
                    elif loss_cfg.method == "ips":
                        loss, diag = O.loss_ips(*args, w)
                    elif loss_cfg.method == "snips":
                        loss, diag = O.loss_snips(*args, w)
                    elif loss_cfg.method in ("direct", "dr"):
                        gu = rng.integers(0, dataset.num_users, size=len(idx))
                        gi = rng.integers(0, dataset.num_items, size=len(idx))
                        gy = M.score_matrix(imputation, gu, gi, False)
                        if loss_cfg.method == "direct":
                            loss, diag = O.loss_direct(*args, gu, gi, gy)
                        else:
                            oy = M.score_matrix(imputation, train.users[idx],
                                                train.items[idx], False)
                            loss, diag = O.loss_dr(*args, w, gu, gi, gy, oy)
                    elif loss_cfg.method in ("cbr_clip", "cbr_sample"):
                        loss, diag = O.loss_cbr_ipm(*args, w, epoch_pairs)
                    elif loss_cfg.method == "cbr_adv":
                        loss, diag = O.loss_cbr_adv(*args, w)
                    else:
                        loss, diag = O.loss_cbr_conf(*args, w)
                    if not np.isfinite(loss.value):
                        raise T.NonFiniteError("training loss diverged")
                    grads = _named_grads(nodes, g.backward(loss))
                    opt_gen.step(bundle.params,
                                 clip_gradients(grads, train_cfg.grad_clip))
                    gen_vals.append(float(loss.value))
                    if "balance" in diag:
                        diag_vals.append(diag["balance"])
        except T.NonFiniteError:
            result.diverged = True
            break

        try:
            if adversarial:
                phi_now = M.phi_matrix(bundle, train.users, train.items, use_conf)
                groups = [phi_now[rows] for rows in B.group_rows(train.items).values()
                          if len(rows) > 0]
                balance_diag = B.jsd_diagnostic(groups, bins=train_cfg.jsd_bins) \
                    if len(groups) >= 2 else 0.0
            elif diag_vals:
                balance_diag = float(np.mean(diag_vals))
            else:
                balance_diag = ""
            report = E.evaluate(bundle, train, val, use_conf) if len(val) else None
        except T.NonFiniteError:
            # params exploded during the epoch even though batch losses stayed finite
            result.diverged = True
            break
        val_auc = report.auc if report else 0.0
        val_ndcg = report.ndcg_at_10 if report else 0.0
        score = val_auc if train_cfg.val_metric == "auc" else val_ndcg
        wall_ms = (time.perf_counter() - t0) * 1000.0
        result.log.append({
            "epoch": epoch,
            "train_loss": float(np.mean(gen_vals)) if gen_vals else "",
            "disc_objective": float(np.mean(disc_vals)) if disc_vals else "",
            "balance_diag": balance_diag,
            "val_auc": val_auc,
            "val_ndcg": val_ndcg,
            "wall_ms": wall_ms,
        })

        if score > result.best_val:
            result.best_val = score
            result.best_epoch = epoch
            result.bundle = bundle.copy()
            if adversarial:
                result.jsd_best = balance_diag
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break
    return result


def write_log_csv(log: list, path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in log:
            fh.write(",".join(_fmt(row[c]) for c in LOG_COLUMNS) + "\n")


def _fmt(v) -> str:
    if v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)
