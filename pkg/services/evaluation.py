"""
Evaluation Service
All-ranking top-K evaluation, per-group hit rates by bundle sparsity, ego/cross
score decomposition and cross-view alignment / dispersion diagnostics
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.sparse as sp

from services.data_ingest import bundle_sparsity_rates
from services.fusion_scoring import BundleScorer, FusedRepresentations, fuse, make_scorer
from services.views import VIEWS, compute_views

logger = logging.getLogger(__name__)

MASK_POLICIES = ('none', 'train', 'train_valid')
SCORE_VARIANTS = ('total', 'ego', 'cross')
DEFAULT_KS = (20, 40)
DEFAULT_GROUPS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
CHUNK_SIZE = 1024


@dataclass(frozen=True, eq=False)
class RankingResult:
    """
    Attributes:
        users: ranked user ids
        topk: one array of bundle ids per user, best first; masked bundles never appear
        scores: the matching scores
        k: requested list length
    """
    users: np.ndarray
    topk: list
    scores: list
    k: int

    def for_user(self, user):
        index = np.searchsorted(self.users, user)
        if index >= len(self.users) or self.users[index] != user:
            raise KeyError(f"user {user} was not ranked")
        return self.topk[index], self.scores[index]


# ============ Ranking ============

def _mask_matrix(dataset, policy):
    if policy not in MASK_POLICIES:
        raise ValueError(f"mask policy must be one of {MASK_POLICIES}, got {policy!r}")
    if policy == 'none':
        return None
    mask = dataset.ub_train.csr
    if policy == 'train_valid':
        mask = mask + dataset.ub_valid.csr
    return sp.csr_matrix(mask)


def _top_k(row, k):
    """Top-k indices of one score row, ties by ascending id, -inf excluded"""
    candidates = np.flatnonzero(row > -np.inf)
    if len(candidates) > k:
        values = row[candidates]
        kth = np.partition(values, len(values) - k)[len(values) - k]
        candidates = candidates[values >= kth]
    order = np.lexsort((candidates, -row[candidates]))
    return candidates[order][:k]


def rank_all(scorer, dataset, k, mask_policy='train', split='test', users=None, threads=1):
    """
    Score every bundle for every evaluated user and keep the top k

    Args:
        scorer: BundleScorer or FusedRepresentations
        dataset: Dataset
        k: list length
        mask_policy: 'none', 'train' or 'train_valid'; masked bundles score -inf
        split: ground-truth split; users without edges in it are not ranked.
            None ranks every user.
        users: explicit user ids, overriding split selection
        threads: worker threads over user chunks

    Returns:
        RankingResult
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if isinstance(scorer, FusedRepresentations):
        scorer = BundleScorer.from_fused(scorer)
    if users is None:
        if split is None:
            users = np.arange(dataset.num_users, dtype=np.int64)
        else:
            users = np.flatnonzero(dataset.split(split).left_degrees() > 0)
    users = np.unique(np.asarray(users, dtype=np.int64))
    mask = _mask_matrix(dataset, mask_policy)

    def _rank_chunk(chunk):
        scores = scorer.scores(chunk).astype(np.float64)
        if mask is not None:
            rows, cols = mask[chunk].nonzero()
            scores[rows, cols] = -np.inf
        tops = [_top_k(row, k) for row in scores]
        return tops, [scores[i, top] for i, top in enumerate(tops)]

    chunks = [users[i:i + CHUNK_SIZE] for i in range(0, len(users), CHUNK_SIZE)]
    if threads and threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_rank_chunk, chunks))
    else:
        parts = [_rank_chunk(chunk) for chunk in chunks]

    topk = [top for tops, _ in parts for top in tops]
    scores = [score for _, part_scores in parts for score in part_scores]
    return RankingResult(users=users, topk=topk, scores=scores, k=k)


# ============ Metrics ============

def _per_user(ranking, ground_truth, k):
    if k > ranking.k:
        raise ValueError(f"ranking holds top-{ranking.k}, cannot score @{k}")
    for user, top in zip(ranking.users, ranking.topk):
        truth = ground_truth.neighbors(user)
        if len(truth) == 0:
            continue
        yield np.isin(top[:k], truth), len(truth)


def recall_at_k(ranking, ground_truth, k):
    """
    Mean over users with ground truth of |top-k ∩ truth| / |truth|

    Args:
        ranking: RankingResult
        ground_truth: InteractionMatrix (users x bundles)
        k: cutoff <= ranking.k
    """
    values = [hits.sum() / size for hits, size in _per_user(ranking, ground_truth, k)]
    return float(np.mean(values)) if values else 0.0


def ndcg_at_k(ranking, ground_truth, k):
    """Mean binary-gain NDCG@k; the ideal list has min(k, |truth|) hits"""
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    values = []
    for hits, size in _per_user(ranking, ground_truth, k):
        dcg = discounts[:len(hits)][hits].sum()
        idcg = discounts[:min(k, size)].sum()
        values.append(dcg / idcg)
    return float(np.mean(values)) if values else 0.0


def split_metrics(scorer, dataset, ks, split='test', mask_policy='train', threads=1):
    """
    Recall and NDCG at every k for one split

    Returns:
        tuple: (recall dict k -> value, ndcg dict k -> value)
    """
    ks = sorted(set(int(k) for k in ks))
    truth = dataset.split(split)
    ranking = rank_all(scorer, dataset, max(ks), mask_policy, split=split, threads=threads)
    recall = {k: recall_at_k(ranking, truth, k) for k in ks}
    ndcg = {k: ndcg_at_k(ranking, truth, k) for k in ks}
    return recall, ndcg


# ============ Group Analysis ============

@dataclass(frozen=True)
class GroupHit:
    lo: float
    hi: float
    closed: bool
    hit_rate: float
    n_pairs: int

    @property
    def label(self):
        return f"[{self.lo:g},{self.hi:g}{']' if self.closed else ')'}"


def _check_group_edges(group_edges):
    edges = np.asarray(group_edges, dtype=np.float64)
    if len(edges) < 2 or np.any(np.diff(edges) <= 0) or edges[0] > 0.0 or edges[-1] < 1.0:
        raise ValueError(f"group edges must increase strictly and cover [0, 1], got {list(group_edges)}")
    return edges


def group_hit_analysis(ranking, dataset, k, group_edges=DEFAULT_GROUPS, split='test'):
    """
    Hit@k of test (user, bundle) pairs grouped by the bundle's B-I-U sparsity rate

    Groups are [lo, hi) except the last, which is closed. Empty groups are absent.

    Returns:
        list of GroupHit in group order
    """
    edges = _check_group_edges(group_edges)
    if k > ranking.k:
        raise ValueError(f"ranking holds top-{ranking.k}, cannot score @{k}")
    rates = bundle_sparsity_rates(dataset)
    last = len(edges) - 2
    groups = np.minimum(np.searchsorted(edges, rates, side='right') - 1, last)

    hits = np.zeros(last + 1, dtype=np.int64)
    counts = np.zeros(last + 1, dtype=np.int64)
    truth = dataset.split(split)
    for user, top in zip(ranking.users, ranking.topk):
        bundles = truth.neighbors(user)
        if len(bundles) == 0:
            continue
        in_top = np.isin(bundles, top[:k])
        np.add.at(counts, groups[bundles], 1)
        np.add.at(hits, groups[bundles], in_top.astype(np.int64))

    return [
        GroupHit(lo=float(edges[g]), hi=float(edges[g + 1]), closed=g == last,
                 hit_rate=float(hits[g] / counts[g]), n_pairs=int(counts[g]))
        for g in range(last + 1) if counts[g]
    ]


# ============ Decomposition ============

def decomposed_eval(reps, coefficients, dataset, ks, mask_policy='train', split='test',
                    enabled=VIEWS, threads=1):
    """
    Rank with the total, ego-view only and cross-view only scores

    Returns:
        dict variant -> (recall dict, ndcg dict)
    """
    modes = {'total': 'fused', 'ego': 'ego_only', 'cross': 'cross_only'}
    out = {}
    for variant in SCORE_VARIANTS:
        scorer = make_scorer(reps, coefficients, modes[variant], enabled)
        out[variant] = split_metrics(scorer, dataset, ks, split, mask_policy, threads)
    return out


# ============ Alignment / Dispersion ============

def _row_cosines(first, second):
    """Cosine of matching rows; rows where either side has zero norm are dropped"""
    first = first.astype(np.float64)
    second = second.astype(np.float64)
    norms = np.linalg.norm(first, axis=1) * np.linalg.norm(second, axis=1)
    keep = norms > 0
    dots = np.einsum('ij,ij->i', first[keep], second[keep])
    return dots / norms[keep], int((~keep).sum())


def _sample_pairs(count, sample_pairs, rng):
    first = rng.integers(0, count, size=sample_pairs)
    second = rng.integers(0, count - 1, size=sample_pairs)
    second += second >= first
    return first, second


@dataclass
class Diagnostics:
    alignment: dict = field(default_factory=dict)
    dispersion: dict = field(default_factory=dict)
    skipped: int = 0


def alignment_dispersion(reps, sample_pairs, rng, coefficients=None, enabled=VIEWS, fused=True):
    """
    Cross-view alignment and representation dispersion

    Alignment for kind E and views (X, Y) is the mean cosine between e^X and e^Y
    of the same entity. Dispersion is the mean cosine over sampled pairs of
    distinct entities, on fused representations (fused=True) or averaged over the
    enabled views.

    Args:
        reps: ViewRepresentations
        sample_pairs: number of sampled entity pairs per kind
        rng: numpy Generator
        coefficients: FusionCoefficients, needed when fused is True
        enabled: view names
        fused: dispersion of fused representations or per-view mean

    Returns:
        Diagnostics; zero-norm rows are skipped and counted in skipped
    """
    views = [view for view in VIEWS if view in enabled]
    out = Diagnostics()
    for kind in ('user', 'bundle'):
        for x, y in combinations(views, 2):
            cosines, skipped = _row_cosines(reps.entity(kind, x), reps.entity(kind, y))
            out.skipped += skipped
            if len(cosines):
                out.alignment[(kind, f"{x}-{y}")] = float(cosines.mean())

    if fused and coefficients is None:
        raise ValueError('fused dispersion needs fusion coefficients')
    combined = fuse(reps, coefficients) if fused else None
    for kind in ('user', 'bundle'):
        if fused:
            blocks = [combined.users if kind == 'user' else combined.bundles]
        else:
            blocks = [reps.entity(kind, view) for view in views]
        count = len(blocks[0])
        if count < 2 or sample_pairs < 1:
            continue
        first, second = _sample_pairs(count, sample_pairs, rng)
        values = []
        for block in blocks:
            cosines, skipped = _row_cosines(block[first], block[second])
            out.skipped += skipped
            if len(cosines):
                values.append(cosines.mean())
        if values:
            out.dispersion[kind] = float(np.mean(values))

    if out.skipped:
        logger.warning(f"Skipped {out.skipped} zero-norm rows in alignment/dispersion")
    return out


# ============ Reports ============

@dataclass
class MetricsReport:
    """
    Evaluation results of one split

    Attributes:
        recall, ndcg: k -> value
        group_hit: list of GroupHit at group_k
        decomposition: variant -> (recall dict, ndcg dict)
        alignment: (kind, 'X-Y') -> mean cosine
        dispersion: kind -> mean cosine
    """
    split: str = 'test'
    recall: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)
    group_hit: list = field(default_factory=list)
    group_k: int = 20
    decomposition: dict = field(default_factory=dict)
    alignment: dict = field(default_factory=dict)
    dispersion: dict = field(default_factory=dict)

    def rows(self):
        """(name, value) pairs in report order"""
        rows = []
        for k in sorted(self.recall):
            rows.append((f"recall@{k}", self.recall[k]))
            rows.append((f"ndcg@{k}", self.ndcg[k]))
        for variant in SCORE_VARIANTS:
            if variant not in self.decomposition:
                continue
            recall, ndcg = self.decomposition[variant]
            for k in sorted(recall):
                rows.append((f"{variant}.recall@{k}", recall[k]))
                rows.append((f"{variant}.ndcg@{k}", ndcg[k]))
        for (kind, pair), value in sorted(self.alignment.items()):
            rows.append((f"alignment.{kind}.{pair}", value))
        for kind, value in sorted(self.dispersion.items()):
            rows.append((f"dispersion.{kind}", value))
        return rows

    def metric_rows(self):
        """(variant, metric, k, value) rows for the run ledger"""
        out = []
        sources = [('total', (self.recall, self.ndcg))]
        sources += [(v, self.decomposition[v]) for v in ('ego', 'cross') if v in self.decomposition]
        for variant, (recall, ndcg) in sources:
            for k in sorted(recall):
                out.append((variant, 'recall', k, recall[k]))
                out.append((variant, 'ndcg', k, ndcg[k]))
        return out

    def as_lines(self):
        lines = [f"{name}={value:.6f}" for name, value in self.rows()]
        for group in self.group_hit:
            lines.append(
                f"group={group.label} hit@{self.group_k}={group.hit_rate:.6f} n_pairs={group.n_pairs}"
            )
        return lines

    def as_tsv(self):
        lines = ['metric\tvalue']
        lines += [f"{name}\t{value:.6f}" for name, value in self.rows()]
        lines += [f"group{g.label}.hit@{self.group_k}\t{g.hit_rate:.6f}" for g in self.group_hit]
        return lines

    def write(self, directory, stem='metrics'):
        """Write <stem>.txt (key=value) and <stem>.tsv; returns both paths"""
        os.makedirs(directory, exist_ok=True)
        text_path = os.path.join(directory, f"{stem}.txt")
        tsv_path = os.path.join(directory, f"{stem}.tsv")
        with open(text_path, 'w', encoding='utf-8') as handle:
            handle.write('\n'.join(self.as_lines()) + '\n')
        with open(tsv_path, 'w', encoding='utf-8') as handle:
            handle.write('\n'.join(self.as_tsv()) + '\n')
        return text_path, tsv_path


def evaluate_embeddings(theta, graphs, dataset, model, split='test', ks=DEFAULT_KS,
                        mask_policy='train', decompose=False, groups=None,
                        diagnostics=False, dispersion_pairs=100000, rng=None, threads=1):
    """
    Full evaluation of an embedding table

    Args:
        theta: EmbeddingTable
        graphs: GraphSet of the dataset
        dataset: Dataset
        model: object carrying layers, pooling, views, fusion and scoring_mode
            (a TrainConfig)
        split: 'valid' or 'test'
        ks: cutoffs
        mask_policy: see rank_all
        decompose: add total / ego / cross metrics
        groups: group edges for the sparsity analysis, or None
        diagnostics: add alignment and dispersion
        dispersion_pairs: sampled pairs per entity kind
        rng: Generator for dispersion sampling; defaults to the evaluation
            stream of model.seed
        threads: ranking threads

    Returns:
        MetricsReport
    """
    reps = compute_views(theta, graphs, model.layers, model.pooling, model.views)
    scorer = make_scorer(reps, model.fusion, model.scoring_mode, model.views)
    ks = sorted(set(int(k) for k in ks))
    truth = dataset.split(split)
    ranking = rank_all(scorer, dataset, max(ks), mask_policy, split=split, threads=threads)

    report = MetricsReport(split=split, group_k=ks[0])
    report.recall = {k: recall_at_k(ranking, truth, k) for k in ks}
    report.ndcg = {k: ndcg_at_k(ranking, truth, k) for k in ks}
    if groups is not None:
        report.group_hit = group_hit_analysis(ranking, dataset, ks[0], groups, split)
    if decompose:
        report.decomposition = decomposed_eval(
            reps, model.fusion, dataset, ks, mask_policy, split, model.views, threads)
    if diagnostics:
        if rng is None:
            from services.trainer import rng_stream
            rng = rng_stream(model.seed, 'evaluation')
        found = alignment_dispersion(
            reps, dispersion_pairs, rng, model.fusion, model.views,
            fused=model.contrast_mode != 'pairwise_cross')
        report.alignment = found.alignment
        report.dispersion = found.dispersion
    return report
