"""
Objective Service
Joint loss of the ranking term (BPR), the self-supervised contrastive term
(InfoNCE over two augmented passes) and L2 regularization, with exact
gradients with respect to the layer-0 embedding table
"""
import logging
from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np
from scipy.special import expit, logsumexp, softmax

from services.augmentation import sample_draw
from services.errors import NumericError
from services.fusion_scoring import coefficient_matrix, fuse, pair_scores, pair_scores_backward
from services.views import VIEWS, EmbeddingTable, ViewRepresentations, backward_views, build_graph_set, compute_views

logger = logging.getLogger(__name__)

CONTRAST_MODES = ('fused_self', 'pairwise_cross', 'off')
BPR_REDUCTIONS = ('mean', 'sum')
ENTITY_KINDS = ('user', 'bundle')


@dataclass(frozen=True)
class LossBreakdown:
    """
    Attributes:
        bpr: ranking loss (reduced as configured)
        contrast_user: InfoNCE over the batch users
        contrast_bundle: InfoNCE over the batch positive bundles
        reg: L2 term before weighting
        total: bpr + beta1 * (contrast_user + contrast_bundle) / 2 + beta2 * reg
        contrast_terms: number of InfoNCE terms built for this step
        zero_norm_rows: rows met with zero norm in the cosine computations
    """
    bpr: float
    contrast_user: float
    contrast_bundle: float
    reg: float
    total: float
    contrast_terms: int = 0
    zero_norm_rows: int = 0

    def as_dict(self):
        return asdict(self)


# ============ BPR ============

def _bpr_parts(diff, reduction):
    if reduction not in BPR_REDUCTIONS:
        raise ValueError(f"bpr reduction must be one of {BPR_REDUCTIONS}, got {reduction!r}")
    losses = np.logaddexp(0.0, -diff)
    # d(-ln sigmoid(x))/dx = -sigmoid(-x)
    grad = -expit(-diff)
    if reduction == 'mean':
        return float(losses.mean()), grad / len(diff)
    return float(losses.sum()), grad


def bpr_loss(scores_pos, scores_neg, reduction='sum'):
    """
    Sum (or mean) of -ln sigmoid(y_pos - y_neg)

    Args:
        scores_pos: positive scores
        scores_neg: negative scores, same length
        reduction: 'sum' or 'mean'

    Returns:
        float
    """
    scores_pos = np.asarray(scores_pos, dtype=np.float64)
    scores_neg = np.asarray(scores_neg, dtype=np.float64)
    if scores_pos.shape != scores_neg.shape or scores_pos.size == 0:
        raise ValueError('bpr_loss needs two equal-length, nonempty score lists')
    loss, _ = _bpr_parts(scores_pos - scores_neg, reduction)
    return loss


# ============ InfoNCE ============

def _unit_rows(block):
    norms = np.linalg.norm(block, axis=1, keepdims=True)
    zero = norms[:, 0] == 0
    safe = np.where(zero[:, None], 1.0, norms)
    return block / safe, safe, zero


def _unit_rows_backward(units, norms, zero, grad):
    # gradient of x / |x|; zero rows have cosine 0 and receive nothing
    out = (grad - units * np.sum(units * grad, axis=1, keepdims=True)) / norms
    out[zero] = 0.0
    return out


def info_nce_with_grad(first, second, ids, tau):
    """
    In-batch InfoNCE between two representations of the same entities

    Args:
        first: (n, d) block of the first pass
        second: (n, d) block of the second pass
        ids: entity rows in the batch; duplicates anchor once
        tau: temperature > 0

    Returns:
        tuple: (loss, unique ids, d loss / d first[ids], d loss / d second[ids],
            zero-norm row count)
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    ids = np.unique(np.asarray(ids, dtype=np.int64))
    if ids.size == 0:
        raise ValueError('info_nce needs at least one entity')
    a_raw = first[ids].astype(np.float64)
    b_raw = second[ids].astype(np.float64)
    a, a_norm, a_zero = _unit_rows(a_raw)
    b, b_norm, b_zero = _unit_rows(b_raw)
    zero_rows = int(a_zero.sum() + b_zero.sum())

    logits = a @ b.T / tau
    n = len(ids)
    loss = float(np.mean(logsumexp(logits, axis=1) - np.diag(logits)))

    d_logits = (softmax(logits, axis=1) - np.eye(n)) / n
    d_a = d_logits @ b / tau
    d_b = d_logits.T @ a / tau
    grad_first = _unit_rows_backward(a, a_norm, a_zero, d_a)
    grad_second = _unit_rows_backward(b, b_norm, b_zero, d_b)
    return loss, ids, grad_first, grad_second, zero_rows


def info_nce(first, second, ids, tau):
    """
    Mean over anchors i of -log softmax_j(cos(first_i, second_j) / tau)[i]

    Zero-norm rows give cosine 0.
    """
    loss, _, _, _, zero_rows = info_nce_with_grad(first, second, ids, tau)
    if zero_rows:
        logger.warning(f"InfoNCE met {zero_rows} zero-norm rows")
    return loss


def contrastive_terms(mode, enabled=VIEWS):
    """
    InfoNCE terms built for one step

    fused_self contrasts the fused passes: one user term and one bundle term no
    matter how many views are enabled. pairwise_cross builds a user and a bundle
    term per unordered pair of enabled views.

    Returns:
        list of (entity kind, first view, second view); views are None for fused terms
    """
    if mode not in CONTRAST_MODES:
        raise ValueError(f"contrast mode must be one of {CONTRAST_MODES}, got {mode!r}")
    if mode == 'off':
        return []
    if mode == 'fused_self':
        return [(kind, None, None) for kind in ENTITY_KINDS]
    ordered = [view for view in VIEWS if view in enabled]
    return [(kind, x, y) for x, y in combinations(ordered, 2) for kind in ENTITY_KINDS]


def pairwise_cross_contrast(first, second, user_ids, bundle_ids, tau, enabled=VIEWS):
    """
    Average of the per-view-pair InfoNCE terms

    For the pair (X, Y), view X of the first pass is contrasted with view Y of
    the second pass, for users and for bundles.

    Args:
        first, second: ViewRepresentations of the two augmented passes
        user_ids, bundle_ids: batch entities
        tau: temperature
        enabled: enabled view names

    Returns:
        float; 0.0 with fewer than two views
    """
    terms = contrastive_terms('pairwise_cross', enabled)
    if not terms:
        return 0.0
    values = []
    for kind, x, y in terms:
        ids = user_ids if kind == 'user' else bundle_ids
        values.append(info_nce(first.entity(kind, x), second.entity(kind, y), ids, tau))
    return float(np.mean(values))


# ============ L2 ============

def l2_reg(theta, batch):
    """
    Squared layer-0 rows of every triple's user, positive and negative bundle,
    counted per occurrence and divided by the number of triples
    """
    n = len(batch)
    if n == 0:
        return 0.0
    total = (np.sum(theta.users[batch.users].astype(np.float64) ** 2)
             + np.sum(theta.bundles[batch.pos].astype(np.float64) ** 2)
             + np.sum(theta.bundles[batch.neg].astype(np.float64) ** 2))
    return float(total / n)


def l2_reg_grad(theta, batch):
    """Gradient of l2_reg as an EmbeddingTable"""
    out = EmbeddingTable.zeros_like(theta)
    n = len(batch)
    if n == 0:
        return out
    np.add.at(out.users, batch.users, 2.0 * theta.users[batch.users] / n)
    np.add.at(out.bundles, batch.pos, 2.0 * theta.bundles[batch.pos] / n)
    np.add.at(out.bundles, batch.neg, 2.0 * theta.bundles[batch.neg] / n)
    return out


# ============ Joint Loss ============

def _check_finite(name, value):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value in the {name} term")


def _contrast(cfg, passes, batch, need_grad):
    """Contrastive loss over two augmented passes and its gradients w.r.t. their views"""
    terms = contrastive_terms(cfg.contrast_mode, cfg.views)
    first, second = passes
    grads = (ViewRepresentations.zeros_like(first), ViewRepresentations.zeros_like(second))
    sums = {'user': 0.0, 'bundle': 0.0}
    counts = {'user': 0, 'bundle': 0}
    zero_rows = 0
    if not terms:
        return 0.0, 0.0, grads, 0, 0

    for kind, _, _ in terms:
        counts[kind] += 1

    if cfg.contrast_mode == 'fused_self':
        fused = (fuse(first, cfg.fusion), fuse(second, cfg.fusion))
        lam = cfg.fusion.as_array()
    ids_of = {'user': np.asarray(batch.users), 'bundle': np.asarray(batch.pos)}

    for kind, x, y in terms:
        if cfg.contrast_mode == 'fused_self':
            a = fused[0].users if kind == 'user' else fused[0].bundles
            b = fused[1].users if kind == 'user' else fused[1].bundles
        else:
            a, b = first.entity(kind, x), second.entity(kind, y)
        loss, ids, d_a, d_b, zeros = info_nce_with_grad(a, b, ids_of[kind], cfg.tau)
        sums[kind] += loss
        zero_rows += zeros
        if not need_grad:
            continue

        # the joint loss weights (user + bundle) / 2, each averaged over its terms
        weight = cfg.beta1 / 2.0 / counts[kind]
        d_a = (weight * d_a).astype(grads[0].user_ub.dtype)
        d_b = (weight * d_b).astype(grads[0].user_ub.dtype)
        if cfg.contrast_mode == 'fused_self':
            for index, view in enumerate(VIEWS):
                if view not in cfg.views or lam[index] == 0:
                    continue
                grads[0].entity(kind, view)[ids] += float(lam[index]) * d_a
                grads[1].entity(kind, view)[ids] += float(lam[index]) * d_b
        else:
            grads[0].entity(kind, x)[ids] += d_a
            grads[1].entity(kind, y)[ids] += d_b

    contrast_user = sums['user'] / counts['user']
    contrast_bundle = sums['bundle'] / counts['bundle']
    return contrast_user, contrast_bundle, grads, len(terms), zero_rows


def forward_backward(theta, cfg, batch, graphs, draws=None, need_grad=True):
    """
    Evaluate the joint loss and, optionally, its gradient

    The clean pass feeds BPR; the two augmented passes feed InfoNCE only.

    Args:
        theta: EmbeddingTable
        cfg: TrainConfig
        batch: TrainingBatch
        graphs: clean GraphSet
        draws: pair of AugmentationDraw (required unless contrast is off)
        need_grad: skip the reverse pass when False

    Returns:
        tuple: (LossBreakdown, EmbeddingTable of gradients or None)
    """
    users = np.asarray(batch.users, dtype=np.int64)
    pos = np.asarray(batch.pos, dtype=np.int64)
    neg = np.asarray(batch.neg, dtype=np.int64)
    propagation = dict(layers=cfg.layers, pooling=cfg.pooling, enabled=cfg.views)

    clean = compute_views(theta, graphs, **propagation)
    matrix = coefficient_matrix(cfg.fusion, cfg.scoring_mode, cfg.views)
    diff = (pair_scores(clean, matrix, users, pos).astype(np.float64)
            - pair_scores(clean, matrix, users, neg).astype(np.float64))
    bpr, d_diff = _bpr_parts(diff, cfg.bpr_reduction)
    _check_finite('bpr', bpr)

    contrast_user = contrast_bundle = 0.0
    term_count = zero_rows = 0
    passes = None
    if cfg.contrast_mode != 'off':
        if draws is None:
            raise ValueError('contrastive training needs a pair of augmentation draws')
        passes = tuple(
            compute_views(theta, draw.graphs, perturbations=draw.hooks, **propagation) for draw in draws
        )
        contrast_user, contrast_bundle, pass_grads, term_count, zero_rows = _contrast(
            cfg, passes, batch, need_grad)
        _check_finite('contrastive', [contrast_user, contrast_bundle])

    reg = l2_reg(theta, batch)
    _check_finite('l2', reg)
    total = bpr + cfg.beta1 * (contrast_user + contrast_bundle) / 2.0 + cfg.beta2 * reg
    breakdown = LossBreakdown(
        bpr=bpr, contrast_user=contrast_user, contrast_bundle=contrast_bundle, reg=reg,
        total=total, contrast_terms=term_count, zero_norm_rows=zero_rows,
    )
    if not need_grad:
        return breakdown, None

    clean_grads = ViewRepresentations.zeros_like(clean)
    pair_scores_backward(clean, matrix, users, pos, d_diff, clean_grads)
    pair_scores_backward(clean, matrix, users, neg, -d_diff, clean_grads)
    grads = backward_views(theta, graphs, clean_grads, **propagation)
    _check_finite('bpr gradient', [grads.users, grads.bundles, grads.items])

    if passes is not None and cfg.beta1 != 0:
        for draw, view_grads in zip(draws, pass_grads):
            part = backward_views(theta, draw.graphs, view_grads, perturbations=draw.hooks, **propagation)
            _check_finite('contrastive gradient', [part.users, part.bundles, part.items])
            grads.add_(part)

    if cfg.beta2 != 0:
        grads.add_(l2_reg_grad(theta, batch).scaled(cfg.beta2))
    return breakdown, grads


def sample_draws(cfg, graphs, rng):
    """Two independent augmentation draws, or None when contrast is off"""
    if cfg.contrast_mode == 'off':
        return None
    return (sample_draw(cfg.aug, graphs, rng), sample_draw(cfg.aug, graphs, rng))


def compute_loss(dataset, theta, cfg, batch, graphs=None, draws=None):
    """LossBreakdown only; draws must be given for contrastive modes"""
    graphs = graphs if graphs is not None else build_graph_set(dataset, theta.dtype)
    breakdown, _ = forward_backward(theta, cfg, batch, graphs, draws, need_grad=False)
    return breakdown


def compute_gradients(dataset, theta, cfg, batch, rng, graphs=None, draws=None):
    """
    Exact gradient of the joint loss for one batch

    Args:
        dataset: Dataset
        theta: EmbeddingTable
        cfg: TrainConfig
        batch: TrainingBatch
        rng: augmentation Generator, used only when draws is None
        graphs: clean GraphSet (built from the dataset when None)
        draws: frozen pair of AugmentationDraw to reuse

    Returns:
        tuple: (LossBreakdown, EmbeddingTable of gradients)
    """
    graphs = graphs if graphs is not None else build_graph_set(dataset, theta.dtype)
    if draws is None:
        draws = sample_draws(cfg, graphs, rng)
    return forward_backward(theta, cfg, batch, graphs, draws, need_grad=True)
