"""
Dataset Ingestion Service
Parses the user-bundle, user-item and bundle-item relation files into validated
sparse matrices, reports dataset statistics and derives BI-sparsified variants
"""
import logging
import math
import os
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from services.errors import DataError

logger = logging.getLogger(__name__)

RELATION_KINDS = ('UB', 'UI', 'BI')

# split name -> file name
RELATION_FILES = {
    'ub_train': 'user_bundle_train.txt',
    'ub_valid': 'user_bundle_tune.txt',
    'ub_test': 'user_bundle_test.txt',
    'ui': 'user_item.txt',
    'bi': 'bundle_item.txt',
}
SIZE_FILE = 'data_size.txt'


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    """
    Binary bipartite relation stored as a sorted, duplicate-free edge list

    Attributes:
        rows: number of left entities
        cols: number of right entities
        edges: int64 array of shape (E, 2) holding (left_id, right_id) pairs
        relation_kind: one of 'UB', 'UI', 'BI'
    """
    rows: int
    cols: int
    edges: np.ndarray
    relation_kind: str

    def __post_init__(self):
        if self.relation_kind not in RELATION_KINDS:
            raise ValueError(f"Unknown relation kind: {self.relation_kind}")
        edges = np.array(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(edges):
            if edges.min() < 0:
                raise DataError(f"{self.relation_kind}: negative id in edge list")
            if edges[:, 0].max() >= self.rows or edges[:, 1].max() >= self.cols:
                raise DataError(
                    f"{self.relation_kind}: id out of range for shape ({self.rows}, {self.cols})"
                )
            codes = np.unique(edges[:, 0] * self.cols + edges[:, 1])
            edges = np.stack([codes // self.cols, codes % self.cols], axis=1)
        edges.setflags(write=False)
        object.__setattr__(self, 'edges', edges)

    @classmethod
    def empty(cls, rows, cols, relation_kind):
        return cls(rows, cols, np.empty((0, 2), dtype=np.int64), relation_kind)

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def num_edges(self):
        return len(self.edges)

    @cached_property
    def csr(self):
        """Binary matrix in CSR layout"""
        data = np.ones(self.num_edges, dtype=np.float64)
        return sp.csr_matrix((data, (self.edges[:, 0], self.edges[:, 1])), shape=self.shape)

    @cached_property
    def codes(self):
        """Sorted int64 codes left_id * cols + right_id, for membership tests"""
        return self.edges[:, 0] * self.cols + self.edges[:, 1]

    def left_degrees(self):
        return np.bincount(self.edges[:, 0], minlength=self.rows)

    def right_degrees(self):
        return np.bincount(self.edges[:, 1], minlength=self.cols)

    def contains(self, left_ids, right_ids):
        """
        Test which (left, right) pairs are edges

        Args:
            left_ids: integer array
            right_ids: integer array of the same length

        Returns:
            numpy bool array
        """
        query = np.asarray(left_ids, dtype=np.int64) * self.cols + np.asarray(right_ids, dtype=np.int64)
        if self.num_edges == 0:
            return np.zeros(query.shape, dtype=bool)
        pos = np.searchsorted(self.codes, query)
        pos = np.minimum(pos, self.num_edges - 1)
        return self.codes[pos] == query

    def neighbors(self, left_id):
        """Right ids connected to one left entity"""
        csr = self.csr
        return csr.indices[csr.indptr[left_id]:csr.indptr[left_id + 1]]

    def with_edges(self, edges):
        return InteractionMatrix(self.rows, self.cols, edges, self.relation_kind)


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    The three relations of a bundle dataset, with the user-bundle relation split
    into train / validation / test. UI and BI are never split.
    """
    ub_train: InteractionMatrix
    ub_valid: InteractionMatrix
    ub_test: InteractionMatrix
    ui: InteractionMatrix
    bi: InteractionMatrix
    name: str = ''

    def __post_init__(self):
        m, n = self.ub_train.shape
        o = self.ui.cols
        problems = []
        for split in (self.ub_valid, self.ub_test):
            if split.shape != (m, n):
                problems.append(f"UB split shape {split.shape} != {(m, n)}")
        if self.ui.shape != (m, o):
            problems.append(f"UI shape {self.ui.shape} != {(m, o)}")
        if self.bi.shape != (n, o):
            problems.append(f"BI shape {self.bi.shape} != {(n, o)}")
        if problems:
            raise DataError('; '.join(problems))

        for a_name, b_name in (('ub_train', 'ub_valid'), ('ub_train', 'ub_test'), ('ub_valid', 'ub_test')):
            a, b = getattr(self, a_name), getattr(self, b_name)
            if a.num_edges and b.num_edges:
                overlap = np.intersect1d(a.codes, b.codes, assume_unique=True)
                if len(overlap):
                    raise DataError(f"{a_name} and {b_name} share {len(overlap)} user-bundle pairs")

    @property
    def num_users(self):
        return self.ub_train.rows

    @property
    def num_bundles(self):
        return self.ub_train.cols

    @property
    def num_items(self):
        return self.ui.cols

    def split(self, name):
        """Return the UB split called 'train', 'valid' or 'test'"""
        try:
            return {'train': self.ub_train, 'valid': self.ub_valid, 'test': self.ub_test}[name]
        except KeyError:
            raise ValueError(f"Unknown split: {name}") from None

    def with_bi(self, bi):
        return replace(self, bi=bi)


@dataclass(frozen=True, eq=False)
class StatisticsRecord:
    """Table-style dataset statistics plus per-bundle B-I-U sparsity rates"""
    num_users: int
    num_bundles: int
    num_items: int
    ub_train_edges: int
    ub_valid_edges: int
    ub_test_edges: int
    ui_edges: int
    bi_edges: int
    avg_items_per_bundle: float
    bundle_sparsity_rates: np.ndarray = field(repr=False)

    @property
    def ub_total_edges(self):
        return self.ub_train_edges + self.ub_valid_edges + self.ub_test_edges

    def to_dict(self):
        """Scalar statistics, without the per-bundle array"""
        return {
            'users': self.num_users,
            'bundles': self.num_bundles,
            'items': self.num_items,
            'ub_train': self.ub_train_edges,
            'ub_valid': self.ub_valid_edges,
            'ub_test': self.ub_test_edges,
            'ub_total': self.ub_total_edges,
            'ui': self.ui_edges,
            'bi': self.bi_edges,
            'avg_items_per_bundle': round(self.avg_items_per_bundle, 4),
            'mean_biu_sparsity': round(float(self.bundle_sparsity_rates.mean()), 4)
            if len(self.bundle_sparsity_rates) else 0.0,
        }

    def as_lines(self):
        return [f"{key}={value}" for key, value in self.to_dict().items()]


# ============ Loading ============

def _read_pairs(path):
    """
    Parse one relation file

    Args:
        path: file path

    Returns:
        tuple: (pairs int64 array (E, 2), line numbers int array (E,))
    """
    if not os.path.isfile(path):
        raise DataError(f"Missing relation file: {path}")

    pairs, line_numbers = [], []
    with open(path, 'r', encoding='utf-8') as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith('#'):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"{path}:{line_no}: expected two ids, got {len(parts)} fields")
            try:
                left, right = int(parts[0], 10), int(parts[1], 10)
            except ValueError:
                raise DataError(f"{path}:{line_no}: non-integer id in {line!r}") from None
            if left < 0 or right < 0:
                raise DataError(f"{path}:{line_no}: negative id in {line!r}")
            pairs.append((left, right))
            line_numbers.append(line_no)

    array = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return array, np.array(line_numbers, dtype=np.int64)


def _find_size_file(dir_path):
    candidate = os.path.join(dir_path, SIZE_FILE)
    if os.path.isfile(candidate):
        return candidate
    for name in sorted(os.listdir(dir_path)):
        if name.endswith('_' + SIZE_FILE):
            return os.path.join(dir_path, name)
    return None


def _read_sizes(path):
    with open(path, 'r', encoding='utf-8') as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith('#'):
                continue
            parts = line.split()
            try:
                sizes = tuple(int(p, 10) for p in parts)
            except ValueError:
                raise DataError(f"{path}:{line_no}: non-integer entity count") from None
            if len(sizes) != 3 or min(sizes) < 0:
                raise DataError(f"{path}:{line_no}: expected 'users bundles items'")
            return sizes
    raise DataError(f"{path}: no entity counts found")


def _check_range(path, pairs, line_numbers, rows, cols):
    if not len(pairs):
        return
    bad = np.flatnonzero((pairs[:, 0] >= rows) | (pairs[:, 1] >= cols))
    if len(bad):
        first = bad[0]
        raise DataError(
            f"{path}:{line_numbers[first]}: id pair ({pairs[first, 0]}, {pairs[first, 1]}) "
            f"outside declared counts ({rows}, {cols})"
        )


def load_dataset(dir_path):
    """
    Load a dataset directory

    Args:
        dir_path: directory holding the five relation files (and optionally a
            data_size.txt header with 'users bundles items')

    Returns:
        Dataset: validated, deduplicated relations

    Raises:
        DataError: missing file, malformed line, id out of range, overlapping
            splits or an empty training split
    """
    if not os.path.isdir(dir_path):
        raise DataError(f"Dataset directory not found: {dir_path}")

    raw = {}
    for split, file_name in RELATION_FILES.items():
        path = os.path.join(dir_path, file_name)
        raw[split] = (path,) + _read_pairs(path)

    size_file = _find_size_file(dir_path)
    if size_file:
        num_users, num_bundles, num_items = _read_sizes(size_file)
    else:
        def _max_id(splits, column):
            values = [raw[s][1][:, column].max() + 1 for s in splits if len(raw[s][1])]
            return int(max(values)) if values else 0

        ub = ('ub_train', 'ub_valid', 'ub_test')
        num_users = max(_max_id(ub, 0), _max_id(('ui',), 0))
        num_bundles = max(_max_id(ub, 1), _max_id(('bi',), 0))
        num_items = max(_max_id(('ui',), 1), _max_id(('bi',), 1))

    shapes = {
        'ub_train': (num_users, num_bundles, 'UB'),
        'ub_valid': (num_users, num_bundles, 'UB'),
        'ub_test': (num_users, num_bundles, 'UB'),
        'ui': (num_users, num_items, 'UI'),
        'bi': (num_bundles, num_items, 'BI'),
    }
    matrices = {}
    for split, (path, pairs, line_numbers) in raw.items():
        rows, cols, kind = shapes[split]
        _check_range(path, pairs, line_numbers, rows, cols)
        matrices[split] = InteractionMatrix(rows, cols, pairs, kind)

    if matrices['ub_train'].num_edges == 0:
        raise DataError(f"Empty training split: {raw['ub_train'][0]}")

    dataset = Dataset(name=os.path.basename(os.path.normpath(dir_path)), **matrices)
    logger.info(
        'Loaded %s: %d users, %d bundles, %d items, %d train / %d valid / %d test UB, %d UI, %d BI',
        dataset.name, num_users, num_bundles, num_items,
        dataset.ub_train.num_edges, dataset.ub_valid.num_edges, dataset.ub_test.num_edges,
        dataset.ui.num_edges, dataset.bi.num_edges,
    )
    return dataset


def write_dataset(dataset, dir_path):
    """
    Write a dataset back to the on-disk layout load_dataset reads

    Args:
        dataset: Dataset
        dir_path: target directory (created if needed)
    """
    os.makedirs(dir_path, exist_ok=True)
    for split, file_name in RELATION_FILES.items():
        matrix = getattr(dataset, split)
        with open(os.path.join(dir_path, file_name), 'w', encoding='utf-8') as handle:
            for left, right in matrix.edges:
                handle.write(f"{left}\t{right}\n")
    with open(os.path.join(dir_path, SIZE_FILE), 'w', encoding='utf-8') as handle:
        handle.write(f"{dataset.num_users}\t{dataset.num_bundles}\t{dataset.num_items}\n")


# ============ Statistics ============

def bundle_sparsity_rates(dataset):
    """
    Per bundle, the fraction of its items that have no user-item interaction

    Empty bundles get rate 0.0.
    """
    item_has_ui = (dataset.ui.right_degrees() > 0).astype(np.float64)
    bundle_sizes = dataset.bi.left_degrees().astype(np.float64)
    cold_items = dataset.bi.csr @ (1.0 - item_has_ui)
    rates = np.zeros(dataset.num_bundles, dtype=np.float64)
    nonempty = bundle_sizes > 0
    rates[nonempty] = cold_items[nonempty] / bundle_sizes[nonempty]
    return rates


def dataset_stats(dataset):
    """
    Compute dataset statistics

    Args:
        dataset: Dataset

    Returns:
        StatisticsRecord
    """
    n = dataset.num_bundles
    return StatisticsRecord(
        num_users=dataset.num_users,
        num_bundles=n,
        num_items=dataset.num_items,
        ub_train_edges=dataset.ub_train.num_edges,
        ub_valid_edges=dataset.ub_valid.num_edges,
        ub_test_edges=dataset.ub_test.num_edges,
        ui_edges=dataset.ui.num_edges,
        bi_edges=dataset.bi.num_edges,
        avg_items_per_bundle=dataset.bi.num_edges / n if n else 0.0,
        bundle_sparsity_rates=bundle_sparsity_rates(dataset),
    )


def write_stats_report(stats, path):
    """Write the key=value statistics lines to a report file"""
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write('\n'.join(stats.as_lines()) + '\n')


# ============ BI Sparsification ============

def sparsify_bi(dataset, drop_rate, seed):
    """
    Uniformly drop bundle-item edges

    Args:
        dataset: Dataset
        drop_rate: fraction of BI edges to drop, in [0, 1)
        seed: integer seed; the surviving edge set is a function of it

    Returns:
        Dataset: copy keeping exactly round((1 - drop_rate) * |BI|) BI edges,
            UB and UI untouched. Bundles may end up empty.
    """
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError(f"drop_rate must be in [0, 1), got {drop_rate}")

    total = dataset.bi.num_edges
    keep = int(math.floor((1.0 - drop_rate) * total + 0.5))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(total, size=keep, replace=False))
    return dataset.with_bi(dataset.bi.with_edges(dataset.bi.edges[chosen]))


def sparsified_dir_name(dir_path, drop_rate, seed):
    """Name of the derived dataset directory for a BI drop experiment"""
    base = os.path.normpath(dir_path)
    return f"{base}_bi_drop{drop_rate:g}_s{seed}"
