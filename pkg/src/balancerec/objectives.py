"""Training objectives: naive, reweighted, imputed and balanced losses.

Every builder appends to a caller-supplied GradGraph and returns scalar
nodes, so the trainer controls which parameter groups are trainable by
how it mounts the bundle. Conventions:

  - delta is clamped binary cross-entropy; soft targets are allowed
    (imputation models hand back probabilities).
  - Reweighted losses take a per-record weight vector (inverse
    propensities or inverse item marginals) as constants.
  - lambda_f regularizes the rating head plus both embedding tables,
    lambda_phi the balancing map, lambda_d / lambda_c / lambda_s the
    discriminator, confounder and exposure nets. Penalties are sums
    over squared entries, so at realistic embedding-table sizes the
    default coefficients must stay tiny or the penalty swamps the
    fit term and drags every score to the flat 0.5 fixed point.
  - Balanced methods ("cbr_*") weight each record by the inverse
    empirical exposure marginal of its item and add one of: an IPM
    penalty over clipped pairs, over sampled pairs, or an adversarial
    group-identification term. The confounded variant routes an inferred
    z through phi and adds an exposure log-likelihood term.

The discriminator objective (to be ascended) is the batch score of
log D^{i_t}(phi(u_t)) minus the discriminator's own L2 penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import balancing as B
from . import models as M
from . import tensor as T

PRED_FLOOR = 1e-12

METHODS = ("base", "ips", "snips", "direct", "dr",
           "cbr_clip", "cbr_sample", "cbr_adv", "cbr_conf")
ADVERSARIAL = ("cbr_adv", "cbr_conf")


@dataclass
class LossConfig:
    method: str = "base"
    gamma: float = 0.5
    lambda_f: float = 1e-6
    lambda_phi: float = 1e-6
    lambda_d: float = 1e-6
    lambda_c: float = 1e-6
    lambda_s: float = 1e-6
    ipm_kind: str = "linear"
    k1: int = 10
    k2: int = 10
    adv_estimator: str = "per_pair"
    exposure_term: bool = True
    propensity_source: str = "true"  # true | estimated | item_marginal

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.ipm_kind not in ("linear", "rbf"):
            raise ValueError(f"unknown ipm kind {self.ipm_kind!r}")
        if self.adv_estimator not in ("per_pair", "per_item"):
            raise ValueError(f"unknown adversarial estimator {self.adv_estimator!r}")
        if self.propensity_source not in ("true", "estimated", "item_marginal"):
            raise ValueError(f"unknown propensity source {self.propensity_source!r}")

    @property
    def uses_confounder(self) -> bool:
        return self.method == "cbr_conf"


def delta(y, y_hat) -> np.ndarray:
    """Clamped cross-entropy -[y log yh + (1-y) log(1-yh)], elementwise."""
    y = np.asarray(y, dtype=np.float64)
    yh = np.clip(np.asarray(y_hat, dtype=np.float64), PRED_FLOOR, 1.0 - PRED_FLOOR)
    return -(y * np.log(yh) + (1.0 - y) * np.log(1.0 - yh))


def _ce_node(g: T.GradGraph, pred: T.Node, labels) -> T.Node:
    """Per-record cross-entropy column against constant (possibly soft) targets."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    y_pos = g.constant(y)
    y_neg = g.constant(1.0 - y)
    log_p = T.log(T.clamp(pred, PRED_FLOOR, 1.0))
    log_q = T.log(T.clamp(T.affine(pred, -1.0, 1.0), PRED_FLOOR, 1.0))
    return T.affine(T.add(T.elementwise_mul(y_pos, log_p),
                          T.elementwise_mul(y_neg, log_q)), -1.0)


def _weighted_mean(g: T.GradGraph, vec: T.Node, weights=None) -> T.Node:
    if weights is None:
        return T.reduce_mean(vec)
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    return T.reduce_mean(T.elementwise_mul(vec, g.constant(w)))


def _l2(g: T.GradGraph, nodes, names) -> T.Node:
    total = None
    for name in names:
        term = T.reduce_sum(T.elementwise_mul(nodes[name], nodes[name]))
        total = term if total is None else T.add(total, term)
    return total if total is not None else g.constant(0.0)


def _regs(g, bundle, nodes, cfg: LossConfig, groups) -> T.Node:
    lam = {"f": cfg.lambda_f, "phi": cfg.lambda_phi, "D": cfg.lambda_d,
           "c": cfg.lambda_c, "s": cfg.lambda_s}
    total = None
    for grp in groups:
        names = bundle.group_names(grp) + (bundle.group_names("emb") if grp == "f" else [])
        term = T.affine(_l2(g, nodes, names), lam[grp])
        total = term if total is None else T.add(total, term)
    return total


def _data_term(g, bundle, nodes, users, items, labels, cfg, weights):
    """Shared forward + (weighted) cross-entropy mean for every method."""
    pred, phi, z = M.score_pairs(g, bundle, nodes, users, items, cfg.uses_confounder)
    ce = _ce_node(g, pred, labels)
    return _weighted_mean(g, ce, weights), pred, phi, z


# -- plain and reweighted objectives ------------------------------------------


def loss_base(g, bundle, nodes, users, items, labels, cfg: LossConfig):
    mean_ce, _, _, _ = _data_term(g, bundle, nodes, users, items, labels, cfg, None)
    loss = T.add(mean_ce, _regs(g, bundle, nodes, cfg, ("f", "phi")))
    return loss, {"ce": float(mean_ce.value)}


def loss_ips(g, bundle, nodes, users, items, labels, cfg: LossConfig, weights):
    mean_ce, _, _, _ = _data_term(g, bundle, nodes, users, items, labels, cfg, weights)
    loss = T.add(mean_ce, _regs(g, bundle, nodes, cfg, ("f", "phi")))
    return loss, {"ce": float(mean_ce.value)}


def loss_snips(g, bundle, nodes, users, items, labels, cfg: LossConfig, weights):
    """Self-normalized reweighting: sum(w * ce) / sum(w); scale-invariant."""
    pred, _, _ = M.score_pairs(g, bundle, nodes, users, items, cfg.uses_confounder)
    ce = _ce_node(g, pred, labels)
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    num = T.reduce_sum(T.elementwise_mul(ce, g.constant(w)))
    den = g.constant(float(w.sum()))
    ratio = T.div(num, den)
    loss = T.add(ratio, _regs(g, bundle, nodes, cfg, ("f", "phi")))
    return loss, {"ce": float(ratio.value)}


def loss_direct(g, bundle, nodes, users, items, labels, cfg: LossConfig,
                grid_users, grid_items, grid_targets):
    """Imputed risk on a sampled grid plus the observed cross-entropy."""
    grid_pred, _, _ = M.score_pairs(g, bundle, nodes, grid_users, grid_items,
                                    cfg.uses_confounder)
    grid_term = T.reduce_mean(_ce_node(g, grid_pred, grid_targets))
    mean_ce, _, _, _ = _data_term(g, bundle, nodes, users, items, labels, cfg, None)
    loss = T.add(T.add(grid_term, mean_ce), _regs(g, bundle, nodes, cfg, ("f", "phi")))
    return loss, {"ce": float(mean_ce.value), "imputed": float(grid_term.value)}


def loss_dr(g, bundle, nodes, users, items, labels, cfg: LossConfig, weights,
            grid_users, grid_items, grid_targets, observed_targets):
    """Doubly robust: imputed grid risk + reweighted residual correction."""
    grid_pred, _, _ = M.score_pairs(g, bundle, nodes, grid_users, grid_items,
                                    cfg.uses_confounder)
    grid_term = T.reduce_mean(_ce_node(g, grid_pred, grid_targets))
    pred, _, _ = M.score_pairs(g, bundle, nodes, users, items, cfg.uses_confounder)
    ce_obs = _ce_node(g, pred, labels)
    ce_imp = _ce_node(g, pred, observed_targets)
    residual = T.add(ce_obs, T.affine(ce_imp, -1.0))
    correction = _weighted_mean(g, residual, weights)
    loss = T.add(T.add(grid_term, correction), _regs(g, bundle, nodes, cfg, ("f", "phi")))
    return loss, {"ce": float(correction.value), "imputed": float(grid_term.value)}


# -- balanced objectives -------------------------------------------------------


def loss_cbr_ipm(g, bundle, nodes, users, items, labels, cfg: LossConfig,
                 weights, pairs):
    """Reweighted risk + gamma * sum of weighted IPM over selected pairs."""
    mean_ce, _, phi, _ = _data_term(g, bundle, nodes, users, items, labels, cfg, weights)
    penalty = B.balance_penalty_node(g, phi, items, pairs, cfg.ipm_kind)
    loss = T.add(T.add(mean_ce, T.affine(penalty, cfg.gamma)),
                 _regs(g, bundle, nodes, cfg, ("f", "phi")))
    return loss, {"ce": float(mean_ce.value), "balance": float(penalty.value)}


def loss_cbr_adv(g, bundle, nodes, users, items, labels, cfg: LossConfig, weights):
    """Reweighted risk + gamma * discriminator score, confounder off."""
    mean_ce, _, phi, _ = _data_term(g, bundle, nodes, users, items, labels, cfg, weights)
    d_probs = M.discriminate(nodes, phi)
    adv = B.adversarial_term_node(g, d_probs, items, cfg.adv_estimator)
    loss = T.add(T.add(mean_ce, T.affine(adv, cfg.gamma)),
                 _regs(g, bundle, nodes, cfg, ("f", "phi", "D")))
    return loss, {"ce": float(mean_ce.value), "adv": float(adv.value)}


def loss_cbr_conf(g, bundle, nodes, users, items, labels, cfg: LossConfig, weights):
    """Confounded variant: inferred z feeds phi, plus exposure likelihood."""
    pred, phi, z = M.score_pairs(g, bundle, nodes, users, items, True)
    ce = _ce_node(g, pred, labels)
    mean_ce = _weighted_mean(g, ce, weights)
    d_probs = M.discriminate(nodes, phi)
    adv = B.adversarial_term_node(g, d_probs, items, cfg.adv_estimator)
    loss = T.add(mean_ce, T.affine(adv, cfg.gamma))
    diag = {"ce": float(mean_ce.value), "adv": float(adv.value)}
    if cfg.exposure_term:
        u = M.user_repr(nodes, np.asarray(users, dtype=np.int64))
        i = M.item_repr(nodes, np.asarray(items, dtype=np.int64))
        ps = M.exposure_prob(nodes, u, i, z)
        nll = T.affine(T.reduce_mean(T.log(T.clamp(ps, PRED_FLOOR, 1.0))), -1.0)
        loss = T.add(loss, nll)
        diag["exposure_nll"] = float(nll.value)
    loss = T.add(loss, _regs(g, bundle, nodes, cfg, ("f", "phi", "D", "c", "s")))
    return loss, diag


def discriminator_objective(g, bundle, nodes, users, items, cfg: LossConfig) -> T.Node:
    """Batch score of log D^{i_t}(phi(u_t)) minus the D regularizer (ascend)."""
    _, phi, _ = M.score_pairs(g, bundle, nodes, users, items, cfg.uses_confounder)
    d_probs = M.discriminate(nodes, phi)
    adv = B.adversarial_term_node(g, d_probs, items, cfg.adv_estimator)
    reg = T.affine(_l2(g, nodes, bundle.group_names("D")), cfg.lambda_d)
    return T.add(adv, T.affine(reg, -1.0))


def generator_groups(cfg: LossConfig) -> frozenset:
    """Parameter groups updated in the descent phase for a method."""
    if cfg.method == "cbr_conf":
        return frozenset({"emb", "phi", "f", "c", "s"})
    return frozenset({"emb", "phi", "f"})
