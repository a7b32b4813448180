"""Training objectives of the downstream stage.

* cross-branch structural contrastive loss (neighbours are positives in both
  branches, everything else is a negative),
* topology-consistent fusion loss (BCE between the mixed cosine similarity
  and the adjacency, restricted to pairs that already agree with it),
* classification cross-entropy on the labelled nodes,
* and their weighted sum.

The two-view InfoNCE used by pre-training lives here too.

All functions accept arrays or tape nodes and return tape nodes.
"""
import dataclasses
from typing import Optional

import numpy as np

from gp2f import logger
from gp2f.errors import ConfigError, DimensionError, NumericError, ValidationError
from gp2f.numerics import (add, exp, log, log_sigmoid, masked_sum, matmul, row_normalize, scale,
                           softmax_cross_entropy, sub, transpose_product, selection_matrix)

FUSION_BATCH = 256


@dataclasses.dataclass
class LossWeights:
    lambda_ctr: float = 0.1
    lambda_fus: float = 0.1
    tau_ctr: float = 0.5
    tau_fus: float = 0.05
    threshold: float = 0.5
    batch_size: int = FUSION_BATCH

    def validate(self):
        if self.tau_ctr <= 0 or self.tau_fus <= 0:
            raise ConfigError(f'temperatures must be positive (tau_ctr={self.tau_ctr}, tau_fus={self.tau_fus})')
        if self.lambda_ctr < 0 or self.lambda_fus < 0:
            raise ConfigError(f'loss weights must be non-negative (lambda_ctr={self.lambda_ctr}, lambda_fus={self.lambda_fus})')
        if not -1 < self.threshold < 1:
            raise ConfigError(f'threshold must lie in (-1, 1), got {self.threshold}')
        if self.batch_size < 1:
            raise ConfigError(f'batch_size must be >= 1, got {self.batch_size}')
        return self


@dataclasses.dataclass
class LossReport:
    l_cls: float
    l_ctr: float
    l_fus: float
    l_total: float
    alpha: Optional[float] = None
    betas: tuple = ()
    grad_norms: dict = dataclasses.field(default_factory=dict)
    degenerate_mask: bool = False


def _value(x):
    return np.asarray(x.value if hasattr(x, 'value') else x, dtype=np.float64)


# CONTRASTIVE
# ===========

def _similarity_exp(a, b, tau):
    # shifting every logit by -1/tau (the largest cosine) leaves each ratio unchanged
    return exp(add(scale(transpose_product(a, b), 1.0 / tau), -1.0 / tau))


def _neighborhood_infonce(intra, cross, adjacency, axis):
    """sum over anchors of -log(positive mass / total mass)

    Anchors run along `axis` of `cross` (rows: first branch, columns: second
    branch); `intra` is the anchors' own-branch block. Positives of anchor i:
    its other-branch copy, plus both-branch copies of its neighbours; total
    mass: every embedding of both branches except the anchor.
    """
    adj = np.asarray(adjacency, dtype=np.float64)
    eye = np.eye(adj.shape[0])
    positive = add(masked_sum(intra, adj, axis=axis), masked_sum(cross, eye + adj, axis=axis))
    total = add(masked_sum(intra, 1.0 - eye, axis=axis), masked_sum(cross, None, axis=axis))
    return masked_sum(sub(log(total), log(positive)))


def _adjacency_of(g):
    if hasattr(g, 'adjacency'):
        return g.adjacency()
    return np.asarray(g, dtype=np.float64)


def contrastive_loss(h_pre, h_adp, g, tau_ctr):
    """symmetric cross-branch contrastive loss, averaged over 2N anchors

    `g` is the graph (or its binary adjacency) whose edges define the positive
    neighbourhoods.
    """
    if tau_ctr <= 0:
        raise ConfigError(f'tau_ctr must be positive, got {tau_ctr}')
    if h_pre.shape != h_adp.shape:
        raise DimensionError(f'contrastive_loss: {h_pre.shape} vs {h_adp.shape}')
    adj = _adjacency_of(g)
    n = h_pre.shape[0]
    u, v = row_normalize(h_pre), row_normalize(h_adp)
    cross = _similarity_exp(u, v, tau_ctr)
    # the adjacency is symmetric, so second-branch anchors read every block by columns
    both = add(_neighborhood_infonce(_similarity_exp(u, u, tau_ctr), cross, adj, 1),
               _neighborhood_infonce(_similarity_exp(v, v, tau_ctr), cross, adj, 0))
    return scale(both, 1.0 / (2 * n))


def _view_infonce(intra, cross_logits, axis):
    """sum over anchors of -log(positive / negatives); anchors along `axis` of the cross block

    the positive is the same node in the other view; the negatives are every
    other node of both views, the positive itself excluded.
    """
    n = cross_logits.shape[0]
    off = 1.0 - np.eye(n)
    negative = add(masked_sum(intra, off, axis=axis), masked_sum(exp(cross_logits), off, axis=axis))
    positive = masked_sum(cross_logits, np.eye(n), axis=axis)
    return masked_sum(sub(log(negative), positive))


def view_contrastive_loss(z1, z2, tau):
    """node-level InfoNCE between two augmented views, averaged over 2N anchors

    Unlike the cross-branch loss, the denominator holds the negatives only, so
    the value can be negative.
    """
    if tau <= 0:
        raise ConfigError(f'tau must be positive, got {tau}')
    if z1.shape != z2.shape:
        raise DimensionError(f'view_contrastive_loss: {z1.shape} vs {z2.shape}')
    n = z1.shape[0]
    if n < 2:
        raise ValidationError(f'view_contrastive_loss: needs at least 2 nodes, got {n}')
    u, v = row_normalize(z1), row_normalize(z2)
    intra_u, intra_v = _similarity_exp(u, u, tau), _similarity_exp(v, v, tau)
    cross_logits = add(scale(transpose_product(u, v), 1.0 / tau), -1.0 / tau)
    # anchors of z2 read the cross block by columns; their intra block is symmetric
    both = add(_view_infonce(intra_u, cross_logits, 1), _view_infonce(intra_v, cross_logits, 0))
    return scale(both, 1.0 / (2 * n))


# FUSION
# ======

def self_similarity(h):
    """cosine similarity matrix; zero rows give zero rows"""
    u = row_normalize(h)
    return transpose_product(u, u)


def mix_similarity(s_pre, s_adp, alpha):
    """alpha S_pre + (1 - alpha) S_adp, as S_adp + alpha (S_pre - S_adp)"""
    if s_pre.shape != s_adp.shape:
        raise DimensionError(f'mix_similarity: {s_pre.shape} vs {s_adp.shape}')
    return add(s_adp, scale(sub(s_pre, s_adp), alpha))


def consistency_mask(s_mix, adjacency, threshold):
    """pairs whose similarity already agrees with the adjacency; never the diagonal"""
    if not -1 < threshold < 1:
        raise ConfigError(f'threshold must lie in (-1, 1), got {threshold}')
    s = _value(s_mix)
    a = np.asarray(adjacency) != 0
    if s.shape != a.shape:
        raise DimensionError(f'consistency_mask: {s.shape} vs {a.shape}')
    above = s > threshold
    mask = (above & a) | (~above & ~a)
    np.fill_diagonal(mask, False)
    return mask


def fusion_loss(s_mix, adjacency, mask, tau_fus, batch=None):
    """mean logit-space BCE of logistic(S/tau_fus) against A over the masked pairs

    Returns ``(loss, degenerate)``; an empty mask gives a zero loss and
    ``degenerate=True``. With `batch`, everything is restricted to the
    subgraph induced by those nodes.
    """
    if tau_fus <= 0:
        raise ConfigError(f'tau_fus must be positive, got {tau_fus}')
    a = np.asarray(adjacency, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if batch is not None:
        batch = np.asarray(batch, dtype=np.int64)
        sel = selection_matrix(batch, a.shape[0])
        s_mix = matmul(sel, transpose_product(s_mix, sel))
        a = a[np.ix_(batch, batch)]
        m = m[np.ix_(batch, batch)]
    if s_mix.shape != a.shape or m.shape != a.shape:
        raise DimensionError(f'fusion_loss: S {s_mix.shape}, A {a.shape}, M {m.shape}')
    count = int(m.sum())
    if count == 0:
        logger.warning('fusion loss: empty consistency mask')
        return scale(masked_sum(s_mix, np.zeros(a.shape)), 0.0), True
    linked = m & (a != 0)
    z = scale(s_mix, 1.0 / tau_fus)
    ll = add(masked_sum(log_sigmoid(z), linked), masked_sum(log_sigmoid(scale(z, -1.0)), m & ~linked))
    return scale(ll, -1.0 / count), False


# CLASSIFICATION AND TOTAL
# ========================

def cross_entropy(logits, labels):
    return softmax_cross_entropy(logits, labels)


def objective(l_cls, l_ctr, l_fus, weights):
    """L_cls + lambda_ctr L_ctr + lambda_fus L_fus as a tape node"""
    return add(add(l_cls, scale(l_ctr, float(weights.lambda_ctr))), scale(l_fus, float(weights.lambda_fus)))


def total_loss(l_cls, l_ctr, l_fus, weights):
    """LossReport for the three terms"""
    terms = [float(np.asarray(_value(x)).reshape(())) for x in (l_cls, l_ctr, l_fus)]
    if not all(np.isfinite(terms)):
        raise NumericError(f'non-finite loss term: L_cls={terms[0]}, L_ctr={terms[1]}, L_fus={terms[2]}')
    total = float(objective(*terms, weights))
    return LossReport(*terms, total)
