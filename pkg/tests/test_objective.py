import math

import numpy as np
import pytest

from conftest import small_config
from services.augmentation import AugmentationSpec
from services.errors import NumericError
from services.fusion_scoring import FusionCoefficients
from services.objective import (
    _contrast, bpr_loss, compute_gradients, compute_loss, contrastive_terms, info_nce, l2_reg,
    pairwise_cross_contrast, sample_draws
)
from services.trainer import TrainingBatch, sample_batch
from services.views import EmbeddingTable, ViewRepresentations, build_graph_set, compute_views


def brute_info_nce(first, second, ids, tau):
    ids = np.unique(ids)
    total = 0.0
    for i in ids:
        def cos(j):
            a, b = first[i], second[j]
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            return 0.0 if na == 0 or nb == 0 else float(a @ b) / (na * nb)
        total += -math.log(math.exp(cos(i) / tau) / sum(math.exp(cos(j) / tau) for j in ids))
    return total / len(ids)


@pytest.fixture
def theta(rng, dataset):
    return EmbeddingTable.xavier(dataset.num_users, dataset.num_bundles, dataset.num_items, 4, rng)


@pytest.fixture
def batch(dataset, rng):
    return sample_batch(dataset, small_config(), rng)


def test_bpr_examples():
    assert bpr_loss([0.0], [0.0]) == pytest.approx(math.log(2))
    assert bpr_loss([10.0], [-10.0]) == pytest.approx(2.06e-9, rel=1e-2)
    assert bpr_loss([-10.0], [10.0]) == pytest.approx(20.0, rel=1e-8)
    assert bpr_loss([0.0, 0.0], [0.0, 0.0], reduction='mean') == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        bpr_loss([], [])


def test_info_nce_examples():
    single = np.array([[1.0, 2.0]])
    assert info_nce(single, single * 3, [0], 0.25) == pytest.approx(0.0, abs=1e-15)

    basis = np.eye(2)
    assert info_nce(basis, basis, [0, 1], 0.25) == pytest.approx(math.log(1 + math.exp(-4)), abs=1e-7)
    assert info_nce(basis, basis, [0, 1], 0.25) == pytest.approx(0.0181499, abs=1e-6)


def test_info_nce_matches_brute_force(rng):
    for _ in range(20):
        first = rng.standard_normal((12, 5))
        second = rng.standard_normal((12, 5))
        first[3] = 0.0
        ids = rng.integers(0, 12, size=8)
        tau = float(rng.uniform(0.1, 1.0))
        assert info_nce(first, second, ids, tau) == pytest.approx(brute_info_nce(first, second, ids, tau), rel=1e-10)


def test_info_nce_rejects_bad_temperature():
    with pytest.raises(ValueError):
        info_nce(np.eye(2), np.eye(2), [0], 0.0)


def test_contrastive_term_counts():
    assert len(contrastive_terms('fused_self')) == 2
    assert len(contrastive_terms('pairwise_cross')) == 6
    assert len(contrastive_terms('pairwise_cross', ('UB', 'BI'))) == 2
    assert contrastive_terms('pairwise_cross', ('UI',)) == []
    assert contrastive_terms('off') == []


def test_pairwise_cross_with_one_view_is_zero(theta, dataset):
    reps = compute_views(theta, build_graph_set(dataset), 2)
    assert pairwise_cross_contrast(reps, reps, [0, 1], [0, 1], 0.5, enabled=('UB',)) == 0.0


def _random_reps(rng, users=9, bundles=7, items=5, dim=4):
    return ViewRepresentations(
        user_ub=rng.standard_normal((users, dim)), user_ui=rng.standard_normal((users, dim)),
        user_bi=rng.standard_normal((users, dim)), bundle_ub=rng.standard_normal((bundles, dim)),
        bundle_ui=rng.standard_normal((bundles, dim)), bundle_bi=rng.standard_normal((bundles, dim)),
        item_ui=rng.standard_normal((items, dim)), item_bi=rng.standard_normal((items, dim)),
    )


def test_pairwise_cross_matches_term_by_term_recomputation(rng):
    first, second = _random_reps(rng), _random_reps(rng)
    user_ids, bundle_ids = np.array([0, 3, 3, 8, 5]), np.array([1, 6, 2, 2, 0])
    expected = []
    for x, y in [('UB', 'UI'), ('UB', 'BI'), ('UI', 'BI')]:
        for kind, ids in (('user', user_ids), ('bundle', bundle_ids)):
            a, b = first.entity(kind, x), second.entity(kind, y)
            brute = brute_info_nce(a, b, ids, 0.4)
            assert info_nce(a, b, ids, 0.4) == pytest.approx(brute, rel=1e-10)
            expected.append(brute)
    assert len(expected) == 6
    got = pairwise_cross_contrast(first, second, user_ids, bundle_ids, 0.4)
    assert got == pytest.approx(sum(expected) / 6, rel=1e-10)


def test_identical_views_make_pairwise_equal_fused(rng):
    def duplicated(source):
        return ViewRepresentations(
            user_ub=source.user_ub, user_ui=source.user_ub.copy(), user_bi=source.user_ub.copy(),
            bundle_ub=source.bundle_ub, bundle_ui=source.bundle_ub.copy(), bundle_bi=source.bundle_ub.copy(),
            item_ui=source.item_ui, item_bi=source.item_bi,
        )

    first, second = duplicated(_random_reps(rng)), duplicated(_random_reps(rng))
    batch = TrainingBatch(users=np.array([0, 2, 4, 6]), pos=np.array([1, 3, 5, 1]), neg=np.array([0, 0, 0, 0]))
    cfg = small_config(contrast_mode='fused_self', tau=0.3)
    fused_user, fused_bundle, _, terms, _ = _contrast(cfg, (first, second), batch, need_grad=False)
    assert terms == 2
    pairwise = pairwise_cross_contrast(first, second, batch.users, batch.pos, 0.3)
    assert pairwise == pytest.approx((fused_user + fused_bundle) / 2, rel=1e-9)


def test_l2_counts_every_occurrence():
    theta = EmbeddingTable(
        users=np.array([[1.0, 0.0], [0.0, 2.0]]),
        bundles=np.array([[3.0, 0.0], [0.0, 1.0]]),
        items=np.zeros((1, 2)),
    )
    batch = TrainingBatch(users=np.array([0, 0]), pos=np.array([0, 0]), neg=np.array([1, 1]))
    assert l2_reg(theta, batch) == pytest.approx((1 + 9 + 1) * 2 / 2)


@pytest.mark.parametrize('mode', ['fused_self', 'pairwise_cross', 'off'])
def test_total_is_the_weighted_sum(dataset, theta, batch, rng, mode):
    cfg = small_config(contrast_mode=mode)
    graphs = build_graph_set(dataset)
    parts = compute_loss(dataset, theta, cfg, batch, graphs, sample_draws(cfg, graphs, rng))
    expected = parts.bpr + cfg.beta1 * (parts.contrast_user + parts.contrast_bundle) / 2 + cfg.beta2 * parts.reg
    assert abs(parts.total - expected) <= 1e-10 * (1 + abs(parts.total))
    if mode == 'off':
        assert parts.contrast_user == 0.0 and parts.contrast_terms == 0


def _finite_difference_check(dataset, theta, cfg, batch, rng):
    graphs = build_graph_set(dataset)
    draws = sample_draws(cfg, graphs, rng)
    _, grads = compute_gradients(dataset, theta, cfg, batch, rng, graphs, draws)
    step = 1e-5
    for name, block in theta.blocks().items():
        for row, col in np.ndindex(block.shape):
            original = block[row, col]
            block[row, col] = original + step
            plus = compute_loss(dataset, theta, cfg, batch, graphs, draws).total
            block[row, col] = original - step
            minus = compute_loss(dataset, theta, cfg, batch, graphs, draws).total
            block[row, col] = original
            numeric = (plus - minus) / (2 * step)
            analytic = getattr(grads, name)[row, col]
            assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-7), (name, row, col)


@pytest.mark.parametrize('aug', [
    AugmentationSpec(kind='none'),
    AugmentationSpec(kind='edge_dropout', edge_drop_rate=0.3),
    AugmentationSpec(kind='message_dropout', message_drop_rate=0.3),
    AugmentationSpec(kind='noise', noise_eps=0.1),
])
@pytest.mark.parametrize('mode', ['fused_self', 'pairwise_cross', 'off'])
def test_gradients_match_finite_differences(dataset, theta, batch, rng, aug, mode):
    cfg = small_config(aug=aug, contrast_mode=mode)
    _finite_difference_check(dataset, theta, cfg, batch, rng)


@pytest.mark.parametrize('changes', [
    dict(scoring_mode='cross_only'),
    dict(scoring_mode='per_view_sum', pooling='k'),
    dict(views=('UB', 'BI'), fusion=FusionCoefficients(0.5, 0.0, 0.5), bpr_reduction='sum'),
])
def test_gradients_for_model_variants(dataset, theta, batch, rng, changes):
    _finite_difference_check(dataset, theta, small_config(**changes), batch, rng)


def test_zero_contrast_weight_matches_contrast_off(dataset, theta, batch, rng):
    graphs = build_graph_set(dataset)
    weighted = small_config(beta1=0.0)
    off = small_config(contrast_mode='off')
    _, g_weighted = compute_gradients(dataset, theta, weighted, batch, rng, graphs)
    _, g_off = compute_gradients(dataset, theta, off, batch, rng, graphs)
    for name in ('users', 'bundles', 'items'):
        np.testing.assert_allclose(getattr(g_weighted, name), getattr(g_off, name), atol=1e-15)


def test_non_finite_embeddings_raise(dataset, theta, batch, rng):
    theta.users[batch.users[0], 0] = np.nan
    with pytest.raises(NumericError, match='bpr'):
        compute_gradients(dataset, theta, small_config(contrast_mode='off'), batch, rng)
