"""
Trainer Service
Training configuration, negative sampling, lazy Adam and the epoch loop with
validation-based checkpoint selection
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from tqdm import tqdm

from services.augmentation import AugmentationSpec
from services.errors import ConfigError, DataError, NumericError
from services.evaluation import split_metrics
from services.fusion_scoring import SCORING_MODES, FusionCoefficients, make_scorer
from services.objective import BPR_REDUCTIONS, CONTRAST_MODES, forward_backward, sample_draws
from services.sparse_graph import POOLING_MODES
from services.views import VIEWS, EmbeddingTable, build_graph_set, compute_views

logger = logging.getLogger(__name__)

PRECISIONS = {'float32': np.float32, 'float64': np.float64}
RNG_STREAMS = ('init', 'sampling', 'augmentation', 'evaluation')
NEGATIVE_REJECTION_CAP = 1000


@dataclass(frozen=True)
class TrainConfig:
    """
    Everything the training loop needs

    Attributes:
        dim: embedding size d
        layers: propagation layers K
        fusion: FusionCoefficients, already restricted to the enabled views
        tau: InfoNCE temperature
        beta1: contrastive weight
        beta2: L2 weight
        contrast_mode: 'fused_self', 'pairwise_cross' or 'off'; the late-fusion
            baseline pairs 'pairwise_cross' with scoring_mode 'per_view_sum'
        scoring_mode: see fusion_scoring.coefficient_matrix
        bpr_reduction: 'mean' per batch or the literal 'sum'
        early_stop_patience: epochs without validation gain before stopping; 0 disables
        eval_k: cutoff of the validation metrics used for model selection
        precision: 'float32' or 'float64'
        threads: ranking threads during validation
    """
    dim: int = 64
    layers: int = 2
    fusion: FusionCoefficients = field(default_factory=FusionCoefficients)
    tau: float = 0.25
    beta1: float = 0.1
    beta2: float = 1e-6
    lr: float = 1e-3
    batch_size: int = 2048
    epochs: int = 100
    negatives_per_positive: int = 1
    aug: AugmentationSpec = field(default_factory=AugmentationSpec)
    contrast_mode: str = 'fused_self'
    seed: int = 2023
    views: tuple = VIEWS
    pooling: str = 'k_plus_one'
    scoring_mode: str = 'fused'
    bpr_reduction: str = 'mean'
    early_stop_patience: int = 0
    eval_k: int = 20
    precision: str = 'float32'
    progress: bool = False
    threads: int = 1

    def validate(self):
        """Return every problem with the configuration"""
        problems = []
        if self.dim < 1:
            problems.append(f"model.dim must be >= 1, got {self.dim}")
        if self.layers < 1:
            problems.append(f"model.layers must be >= 1, got {self.layers}")
        if not self.tau > 0:
            problems.append(f"train.tau must be > 0, got {self.tau}")
        if self.beta1 < 0:
            problems.append(f"train.beta1 must be >= 0, got {self.beta1}")
        if self.beta2 < 0:
            problems.append(f"train.beta2 must be >= 0, got {self.beta2}")
        if not self.lr > 0:
            problems.append(f"train.lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            problems.append(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            problems.append(f"train.epochs must be >= 0, got {self.epochs}")
        if self.negatives_per_positive < 1:
            problems.append(f"train.negatives_per_positive must be >= 1, got {self.negatives_per_positive}")
        if self.contrast_mode not in CONTRAST_MODES:
            problems.append(f"train.contrast_mode must be one of {CONTRAST_MODES}, got {self.contrast_mode!r}")
        if self.bpr_reduction not in BPR_REDUCTIONS:
            problems.append(f"train.bpr_reduction must be one of {BPR_REDUCTIONS}, got {self.bpr_reduction!r}")
        if self.early_stop_patience < 0:
            problems.append(f"train.early_stop_patience must be >= 0, got {self.early_stop_patience}")
        if self.eval_k < 1:
            problems.append(f"train.eval_k must be >= 1, got {self.eval_k}")
        if not self.views or any(view not in VIEWS for view in self.views):
            problems.append(f"model.views must be a nonempty subset of {VIEWS}, got {self.views}")
        if self.pooling not in POOLING_MODES:
            problems.append(f"model.pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if self.scoring_mode not in SCORING_MODES:
            problems.append(f"model.scoring_mode must be one of {SCORING_MODES}, got {self.scoring_mode!r}")
        if self.precision not in PRECISIONS:
            problems.append(f"run.precision must be one of {tuple(PRECISIONS)}, got {self.precision!r}")
        problems.extend(self.aug.validate())
        return problems

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


def rng_stream(seed, name):
    """Independent Generator for one named randomness stream of a run"""
    sequence = np.random.SeedSequence(seed, spawn_key=(RNG_STREAMS.index(name),))
    return np.random.default_rng(sequence)


# ============ Negative Sampling ============

class TrainingTriple(NamedTuple):
    user: int
    pos: int
    neg: int


@dataclass(frozen=True, eq=False)
class TrainingBatch:
    """Column arrays of a batch of (user, positive bundle, negative bundle) triples"""
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    @classmethod
    def from_triples(cls, triples):
        columns = np.array([tuple(t) for t in triples], dtype=np.int64).reshape(-1, 3)
        return cls(users=columns[:, 0], pos=columns[:, 1], neg=columns[:, 2])

    def __len__(self):
        return len(self.users)

    def __iter__(self):
        for user, pos, neg in zip(self.users, self.pos, self.neg):
            yield TrainingTriple(int(user), int(pos), int(neg))


def sample_batch(dataset, cfg, rng, positives=None):
    """
    Draw training triples

    Args:
        dataset: Dataset
        cfg: TrainConfig (batch_size, negatives_per_positive)
        rng: sampling Generator
        positives: indices into the train edge list; None draws batch_size of
            them uniformly with replacement

    Returns:
        TrainingBatch; every positive appears negatives_per_positive times, each
            with its own negative drawn uniformly among bundles the user has no
            train edge with
    """
    train = dataset.ub_train
    if train.num_edges == 0:
        raise DataError('the train split has no user-bundle edges')
    if positives is None:
        positives = rng.integers(0, train.num_edges, size=cfg.batch_size)
    positives = np.repeat(np.asarray(positives, dtype=np.int64), cfg.negatives_per_positive)
    users = train.edges[positives, 0]
    pos = train.edges[positives, 1]

    neg = rng.integers(0, dataset.num_bundles, size=len(users))
    pending = np.flatnonzero(train.contains(users, neg))
    draws = 1
    while len(pending) and draws < NEGATIVE_REJECTION_CAP:
        neg[pending] = rng.integers(0, dataset.num_bundles, size=len(pending))
        pending = pending[train.contains(users[pending], neg[pending])]
        draws += 1

    if len(pending):
        logger.warning(f"Skipped {len(pending)} triples after {NEGATIVE_REJECTION_CAP} rejected negative draws")
        keep = np.ones(len(users), dtype=bool)
        keep[pending] = False
        users, pos, neg = users[keep], pos[keep], neg[keep]
    return TrainingBatch(users=users, pos=pos, neg=neg)


# ============ Optimizer ============

@dataclass(eq=False)
class AdamState:
    """First and second moment tables plus the global step counter"""
    m: EmbeddingTable
    v: EmbeddingTable
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, theta):
        return cls(m=EmbeddingTable.zeros_like(theta), v=EmbeddingTable.zeros_like(theta))


def adam_step(theta, grads, state, lr):
    """
    Lazy Adam update in place

    Only rows with a nonzero gradient move; their moments are updated and the
    bias correction uses the global step count.

    Returns:
        theta
    """
    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for name in ('users', 'bundles', 'items'):
        grad = getattr(grads, name)
        if grad.shape != getattr(theta, name).shape:
            raise ValueError(f"gradient {name} shape {grad.shape} != {getattr(theta, name).shape}")
        rows = np.flatnonzero(np.any(grad != 0, axis=1))
        if rows.size == 0:
            continue
        params, m, v = getattr(theta, name), getattr(state.m, name), getattr(state.v, name)
        g = grad[rows]
        m[rows] = state.beta1 * m[rows] + (1.0 - state.beta1) * g
        v[rows] = state.beta2 * v[rows] + (1.0 - state.beta2) * g * g
        m_hat = m[rows] / bias1
        v_hat = v[rows] / bias2
        params[rows] -= float(lr) * m_hat / (np.sqrt(v_hat) + state.eps)
    return theta


# ============ Training Log ============

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    bpr: float
    contrast_user: float
    contrast_bundle: float
    reg: float
    total: float
    val_recall: float
    val_ndcg: float
    seconds: float = 0.0
    batches: int = 0


class TrainingLog:
    """Per-epoch loss breakdown and validation metrics"""

    def __init__(self, k=20):
        self.k = k
        self.records = []
        self.best_epoch = 0
        self.stopped_early = False

    def append(self, record):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def header(self):
        return f"epoch\tbpr\tcl_user\tcl_bundle\treg\ttotal\tval_recall@{self.k}\tval_ndcg@{self.k}"

    def as_lines(self):
        # wall-clock seconds stay out of the file so same-seed runs match exactly
        lines = ['# ' + self.header()]
        for r in self.records:
            values = (r.bpr, r.contrast_user, r.contrast_bundle, r.reg, r.total, r.val_recall, r.val_ndcg)
            lines.append('\t'.join([str(r.epoch)] + ['%.10g' % value for value in values]))
        return lines

    def write(self, path):
        with open(path, 'w', encoding='utf-8') as handle:
            handle.write('\n'.join(self.as_lines()) + '\n')


# ============ Training Loop ============

def _validate(theta, graphs, dataset, cfg):
    reps = compute_views(theta, graphs, cfg.layers, cfg.pooling, cfg.views)
    scorer = make_scorer(reps, cfg.fusion, cfg.scoring_mode, cfg.views)
    recall, ndcg = split_metrics(scorer, dataset, [cfg.eval_k], 'valid', 'train', cfg.threads)
    return recall[cfg.eval_k], ndcg[cfg.eval_k]


def train(dataset, cfg, on_epoch=None, theta=None):
    """
    Train the layer-0 embedding table

    Each epoch shuffles the train edges and walks them in batches of
    cfg.batch_size. The table with the best validation Recall@eval_k is kept;
    without validation edges the last epoch is kept.

    Args:
        dataset: Dataset
        cfg: TrainConfig
        on_epoch: optional callback receiving every EpochRecord
        theta: optional starting table (Xavier initialization otherwise)

    Returns:
        tuple: (EmbeddingTable, TrainingLog)
    """
    problems = cfg.validate()
    if problems:
        raise ConfigError(problems)
    if dataset.ub_train.num_edges == 0:
        raise DataError('the train split has no user-bundle edges')

    dtype = cfg.dtype
    sampling_rng = rng_stream(cfg.seed, 'sampling')
    aug_rng = rng_stream(cfg.seed, 'augmentation')
    if theta is None:
        theta = EmbeddingTable.xavier(
            dataset.num_users, dataset.num_bundles, dataset.num_items, cfg.dim,
            rng_stream(cfg.seed, 'init'), dtype)
    else:
        theta = theta.astype(dtype)
    graphs = build_graph_set(dataset, dtype)
    state = AdamState.zeros_like(theta)
    log = TrainingLog(k=cfg.eval_k)

    has_valid = dataset.ub_valid.num_edges > 0
    if not has_valid:
        logger.warning('Validation split is empty; keeping the last epoch')
    best = theta.copy()
    best_recall = -math.inf
    stale = 0
    num_edges = dataset.ub_train.num_edges

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = sampling_rng.permutation(num_edges)
        batches = [order[i:i + cfg.batch_size] for i in range(0, num_edges, cfg.batch_size)]
        epoch_draws = None
        if cfg.aug.resample == 'per_epoch':
            epoch_draws = sample_draws(cfg, graphs, aug_rng)

        sums = np.zeros(5)
        done = 0
        zero_rows = 0
        for index, positives in enumerate(tqdm(batches, desc=f"epoch {epoch}", leave=False,
                                               disable=not cfg.progress)):
            batch = sample_batch(dataset, cfg, sampling_rng, positives)
            if len(batch) == 0:
                continue
            draws = epoch_draws if epoch_draws is not None else sample_draws(cfg, graphs, aug_rng)
            try:
                breakdown, grads = forward_backward(theta, cfg, batch, graphs, draws)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {index}: {exc}") from exc
            if not math.isfinite(breakdown.total):
                raise NumericError(f"epoch {epoch}, batch {index}: total loss is {breakdown.total}")
            adam_step(theta, grads, state, cfg.lr)
            sums += (breakdown.bpr, breakdown.contrast_user, breakdown.contrast_bundle,
                     breakdown.reg, breakdown.total)
            zero_rows += breakdown.zero_norm_rows
            done += 1

        if zero_rows:
            logger.warning(f"Epoch {epoch}: {zero_rows} zero-norm rows in the contrastive term")
        means = sums / max(done, 1)
        val_recall = val_ndcg = math.nan
        if has_valid:
            val_recall, val_ndcg = _validate(theta, graphs, dataset, cfg)
        record = EpochRecord(
            epoch, *(float(v) for v in means), val_recall, val_ndcg,
            seconds=time.perf_counter() - started, batches=done,
        )
        log.append(record)
        logger.info(
            f"Epoch {epoch} - loss {record.total:.5f} (bpr {record.bpr:.5f}, "
            f"cl {record.contrast_user:.5f}/{record.contrast_bundle:.5f}) - "
            f"val recall@{cfg.eval_k} {val_recall:.4f} ndcg@{cfg.eval_k} {val_ndcg:.4f} - "
            f"{record.seconds:.2f}s"
        )
        if on_epoch is not None:
            on_epoch(record)

        if not has_valid:
            best = theta.copy()
            log.best_epoch = epoch
            continue
        if val_recall > best_recall:
            best_recall = val_recall
            best = theta.copy()
            log.best_epoch = epoch
            stale = 0
            logger.info(f"New best validation recall@{cfg.eval_k}: {val_recall:.4f}")
        else:
            stale += 1
            if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                log.stopped_early = True
                logger.info(f"Early stop at epoch {epoch}, best epoch {log.best_epoch}")
                break

    return best, log
