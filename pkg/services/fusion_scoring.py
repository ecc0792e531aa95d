"""
Fusion and Scoring Service
View coefficients, early fusion of the three views, inner-product scoring and
the exact split of a score into ego-view and cross-view parts
"""
from dataclasses import dataclass

import numpy as np

from services.errors import ConfigError, ShapeError
from services.views import VIEWS

SCORING_MODES = ('fused', 'per_view_sum', 'ego_only', 'cross_only')
LAMBDA_TOLERANCE = 1e-9


@dataclass(frozen=True)
class FusionCoefficients:
    """View coefficients (UB, UI, BI); nonnegative and summing to one"""
    lambda1: float = 1.0 / 3.0
    lambda2: float = 1.0 / 3.0
    lambda3: float = 1.0 / 3.0

    def __post_init__(self):
        values = self.as_array()
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ConfigError(f"view coefficients must be finite and nonnegative, got {tuple(values)}")
        if abs(values.sum() - 1.0) > LAMBDA_TOLERANCE:
            raise ConfigError(f"view coefficients must sum to 1, got {values.sum():.12g}")

    @classmethod
    def from_config(cls, lambda1, lambda2, lambda3, enabled=VIEWS):
        """
        Validate raw coefficients, then zero the disabled views and renormalize

        Args:
            lambda1, lambda2, lambda3: configured coefficients (must sum to 1)
            enabled: iterable of enabled view names

        Returns:
            FusionCoefficients
        """
        raw = cls(lambda1, lambda2, lambda3)
        values = raw.as_array()
        mask = np.array([view in enabled for view in VIEWS], dtype=np.float64)
        if mask.all():
            return raw
        kept = values * mask
        if kept.sum() <= 0:
            if not mask.any():
                raise ConfigError('at least one view must be enabled')
            # every enabled view had coefficient 0: fall back to equal weights
            kept = mask
        kept = kept / kept.sum()
        return cls(*kept.tolist())

    def as_array(self):
        return np.array([self.lambda1, self.lambda2, self.lambda3], dtype=np.float64)


@dataclass(eq=False)
class FusedRepresentations:
    users: np.ndarray
    bundles: np.ndarray


@dataclass(frozen=True)
class ScoreDecomposition:
    total: float
    ego: float
    cross: float


def fuse(reps, coefficients):
    """
    Early fusion: coefficient-weighted sum of the per-view blocks

    Args:
        reps: ViewRepresentations
        coefficients: FusionCoefficients

    Returns:
        FusedRepresentations
    """
    if not isinstance(coefficients, FusionCoefficients):
        raise ConfigError('fuse expects FusionCoefficients')
    lam = coefficients.as_array()
    users = sum(float(lam[i]) * reps.users(view) for i, view in enumerate(VIEWS))
    bundles = sum(float(lam[i]) * reps.bundles(view) for i, view in enumerate(VIEWS))
    return FusedRepresentations(users=np.asarray(users), bundles=np.asarray(bundles))


def _check_id(name, value, count):
    if not 0 <= value < count:
        raise IndexError(f"{name} {value} out of range [0, {count})")


def score(fused, user, bundle):
    """Inner product of one fused user row and one fused bundle row"""
    _check_id('user', user, len(fused.users))
    _check_id('bundle', bundle, len(fused.bundles))
    return float(np.dot(fused.users[user], fused.bundles[bundle]))


def decompose_score(reps, coefficients, user, bundle, mode='fused', enabled=VIEWS):
    """
    Split a score into ego-view and cross-view parts

    With C = coefficient_matrix(coefficients, mode, enabled):
    ego = sum_X C[X, X] (u^X . b^X), cross = sum_{X != Y} C[X, Y] (u^X . b^Y).
    In fused mode total is the fused inner product itself; otherwise it is the
    score the mode ranks with, so per_view_sum has no cross part.

    Returns:
        ScoreDecomposition
    """
    _check_id('user', user, len(reps.user_ub))
    _check_id('bundle', bundle, len(reps.bundle_ub))
    user_rows = np.stack([reps.users(view)[user] for view in VIEWS]).astype(np.float64)
    bundle_rows = np.stack([reps.bundles(view)[bundle] for view in VIEWS]).astype(np.float64)
    products = user_rows @ bundle_rows.T
    weights = coefficient_matrix(coefficients, mode, enabled)
    ego = float(np.sum(np.diag(weights) * np.diag(products)))
    cross = float(np.sum(weights * products) - ego)
    if mode == 'fused':
        total = score(fuse(reps, coefficients), user, bundle)
    else:
        total = ego + cross
    return ScoreDecomposition(total=total, ego=ego, cross=cross)


def coefficient_matrix(coefficients, mode='fused', enabled=VIEWS):
    """
    3x3 matrix C with score = sum_{X,Y} C[X, Y] (u^X . b^Y)

    Args:
        coefficients: FusionCoefficients
        mode: 'fused' (lam lam^T), 'per_view_sum' (identity over enabled views),
            'ego_only' (diag lam^2) or 'cross_only' (lam lam^T - diag lam^2)
        enabled: enabled view names

    Returns:
        numpy array (3, 3)
    """
    lam = coefficients.as_array()
    full = np.outer(lam, lam)
    if mode == 'fused':
        return full
    if mode == 'per_view_sum':
        return np.diag([1.0 if view in enabled else 0.0 for view in VIEWS])
    if mode == 'ego_only':
        return np.diag(lam * lam)
    if mode == 'cross_only':
        return full - np.diag(lam * lam)
    raise ConfigError(f"scoring mode must be one of {SCORING_MODES}, got {mode!r}")


class BundleScorer:
    """
    Scores every bundle for a set of users as sum_p users_p[u] . bundles_p^T

    Built either from fused representations (one pair) or from view blocks and a
    coefficient matrix (one pair per view row of the matrix).
    """

    def __init__(self, pairs):
        if not pairs:
            raise ShapeError('BundleScorer needs at least one block pair')
        self.pairs = pairs
        self.num_users = len(pairs[0][0])
        self.num_bundles = len(pairs[0][1])

    @classmethod
    def from_fused(cls, fused):
        return cls([(fused.users, fused.bundles)])

    @classmethod
    def from_views(cls, reps, matrix):
        pairs = []
        for x, view_x in enumerate(VIEWS):
            if not np.any(matrix[x]):
                continue
            mix = sum(float(matrix[x, y]) * reps.bundles(view_y) for y, view_y in enumerate(VIEWS) if matrix[x, y])
            pairs.append((reps.users(view_x), np.asarray(mix)))
        if not pairs:
            # all-zero matrix (e.g. cross_only with one view): every score is 0
            pairs.append((np.zeros_like(reps.user_ub), np.zeros_like(reps.bundle_ub)))
        return cls(pairs)

    def scores(self, user_ids):
        """Score matrix (len(user_ids), num_bundles)"""
        user_ids = np.asarray(user_ids, dtype=np.int64)
        total = None
        for user_block, bundle_block in self.pairs:
            part = user_block[user_ids] @ bundle_block.T
            total = part if total is None else total + part
        return total


def make_scorer(reps, coefficients, mode='fused', enabled=VIEWS):
    """BundleScorer for a scoring mode; fused mode ranks with the fused representations"""
    if mode == 'fused':
        return BundleScorer.from_fused(fuse(reps, coefficients))
    return BundleScorer.from_views(reps, coefficient_matrix(coefficients, mode, enabled))


def pair_scores(reps, matrix, users, bundles):
    """
    Scores of (user, bundle) pairs under coefficient matrix C

    Args:
        reps: ViewRepresentations
        matrix: coefficient matrix from coefficient_matrix
        users, bundles: equal-length id arrays

    Returns:
        numpy array of scores
    """
    out = np.zeros(len(users), dtype=reps.user_ub.dtype)
    for x, view_x in enumerate(VIEWS):
        for y, view_y in enumerate(VIEWS):
            if matrix[x, y]:
                out += float(matrix[x, y]) * np.einsum(
                    'ij,ij->i', reps.users(view_x)[users], reps.bundles(view_y)[bundles]
                )
    return out


def pair_scores_backward(reps, matrix, users, bundles, grad, out):
    """
    Accumulate d loss / d view blocks for pair_scores into out (ViewRepresentations)

    Args:
        grad: d loss / d score for every pair
    """
    grad = np.asarray(grad, dtype=out.user_ub.dtype)[:, None]
    for x, view_x in enumerate(VIEWS):
        for y, view_y in enumerate(VIEWS):
            c = float(matrix[x, y])
            if not c:
                continue
            np.add.at(out.users(view_x), users, c * grad * reps.bundles(view_y)[bundles])
            np.add.at(out.bundles(view_y), bundles, c * grad * reps.users(view_x)[users])
