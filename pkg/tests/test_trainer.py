import logging

import numpy as np
import pytest

from conftest import small_config
from services.augmentation import AugmentationSpec
from services.data_ingest import Dataset, InteractionMatrix
from services.errors import ConfigError, NumericError
from services.evaluation import rank_all, recall_at_k
from services.fusion_scoring import make_scorer
from services.trainer import (
    AdamState, TrainConfig, TrainingBatch, adam_step, rng_stream, sample_batch, train
)
from services.views import EmbeddingTable, build_graph_set, compute_views


def _one_user_dataset():
    return Dataset(
        ub_train=InteractionMatrix(1, 2, [(0, 0)], 'UB'),
        ub_valid=InteractionMatrix.empty(1, 2, 'UB'),
        ub_test=InteractionMatrix.empty(1, 2, 'UB'),
        ui=InteractionMatrix(1, 2, [(0, 0)], 'UI'),
        bi=InteractionMatrix(2, 2, [(0, 0), (1, 1)], 'BI'),
    )


def test_only_possible_negative_is_drawn(rng):
    batch = sample_batch(_one_user_dataset(), small_config(batch_size=50), rng)
    assert len(batch) == 50
    assert set(batch.neg.tolist()) == {1}
    assert set(batch.pos.tolist()) == {0}


def test_negatives_never_hit_train_edges(dataset, rng):
    cfg = small_config(batch_size=100_000)
    batch = sample_batch(dataset, cfg, rng)
    assert not np.any(dataset.ub_train.contains(batch.users, batch.neg))
    assert np.all(dataset.ub_train.contains(batch.users, batch.pos))


def test_negative_frequencies_are_uniform(rng):
    users, bundles = 1, 6
    dataset = Dataset(
        ub_train=InteractionMatrix(users, bundles, [(0, 0), (0, 1)], 'UB'),
        ub_valid=InteractionMatrix.empty(users, bundles, 'UB'),
        ub_test=InteractionMatrix.empty(users, bundles, 'UB'),
        ui=InteractionMatrix.empty(users, 1, 'UI'),
        bi=InteractionMatrix.empty(bundles, 1, 'BI'),
    )
    batch = sample_batch(dataset, small_config(batch_size=40_000), rng)
    counts = np.bincount(batch.neg, minlength=bundles)
    assert counts[:2].sum() == 0
    np.testing.assert_allclose(counts[2:] / len(batch), 0.25, atol=0.01)


def test_saturated_user_is_skipped_with_warning(rng, caplog):
    dataset = Dataset(
        ub_train=InteractionMatrix(2, 2, [(0, 0), (0, 1), (1, 0)], 'UB'),
        ub_valid=InteractionMatrix.empty(2, 2, 'UB'),
        ub_test=InteractionMatrix.empty(2, 2, 'UB'),
        ui=InteractionMatrix.empty(2, 1, 'UI'),
        bi=InteractionMatrix.empty(2, 1, 'BI'),
    )
    with caplog.at_level(logging.WARNING, logger='services.trainer'):
        batch = sample_batch(dataset, small_config(), rng, positives=np.array([0, 1, 2]))
    assert batch.users.tolist() == [1]
    assert batch.neg.tolist() == [1]
    assert 'Skipped 2 triples' in caplog.text


def test_negatives_per_positive_repeats_positives(dataset, rng):
    batch = sample_batch(dataset, small_config(negatives_per_positive=3), rng, positives=np.array([0, 4]))
    assert len(batch) == 6
    assert batch.pos.tolist()[:3] == [dataset.ub_train.edges[0, 1]] * 3


def _table(values):
    return EmbeddingTable(
        users=np.array(values, dtype=np.float64).reshape(1, -1),
        bundles=np.zeros((1, len(values))),
        items=np.zeros((1, len(values))),
    )


def test_zero_gradient_leaves_rows_alone():
    theta = _table([1.0, -2.0])
    state = AdamState.zeros_like(theta)
    adam_step(theta, EmbeddingTable.zeros_like(theta), state, 0.1)
    np.testing.assert_array_equal(theta.users, [[1.0, -2.0]])
    assert state.step == 1


def test_first_adam_step_moves_by_learning_rate():
    theta = _table([1.0, -2.0])
    state = AdamState.zeros_like(theta)
    adam_step(theta, _table([3.0, -0.5]), state, 0.01)
    np.testing.assert_allclose(theta.users, [[1.0 - 0.01, -2.0 + 0.01]], rtol=1e-6)


def test_adam_matches_scalar_reference():
    grads = [0.5, -1.0, 2.0, 0.0, 0.3]
    theta = _table([0.2])
    state = AdamState.zeros_like(theta)

    x, m, v = 0.2, 0.0, 0.0
    for step, g in enumerate(grads, start=1):
        adam_step(theta, _table([g]), state, 0.05)
        if g != 0.0:
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.05 * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
        assert theta.users[0, 0] == pytest.approx(x, rel=1e-12)


def test_rng_streams_are_independent():
    first = rng_stream(7, 'sampling').random(4)
    again = rng_stream(7, 'sampling').random(4)
    other = rng_stream(7, 'augmentation').random(4)
    np.testing.assert_array_equal(first, again)
    assert not np.allclose(first, other)
    with pytest.raises(ValueError):
        rng_stream(7, 'unknown')


def test_invalid_config_is_rejected(dataset):
    with pytest.raises(ConfigError) as info:
        train(dataset, small_config(tau=0.0, lr=-1.0))
    assert len(info.value.errors) == 2


def test_same_seed_gives_identical_logs(dataset):
    cfg = small_config(epochs=3)
    _, first = train(dataset, cfg)
    _, second = train(dataset, cfg)
    assert first.as_lines() == second.as_lines()
    assert len(first) == 3 and 1 <= first.best_epoch <= 3
    assert first.as_lines()[0].startswith('# epoch\tbpr')

    _, third = train(dataset, small_config(epochs=3, seed=12))
    assert third.as_lines() != first.as_lines()


def test_contrast_off_trains_and_reports_zero_contrast(dataset):
    _, log = train(dataset, small_config(contrast_mode='off', aug=AugmentationSpec(kind='none')))
    assert all(record.contrast_user == 0.0 and record.contrast_bundle == 0.0 for record in log)


def test_per_epoch_resampling_trains(dataset):
    cfg = small_config(aug=AugmentationSpec(kind='noise', noise_eps=0.1, resample='per_epoch'))
    _, log = train(dataset, cfg)
    assert all(np.isfinite(record.total) for record in log)


def test_early_stopping(dataset):
    _, log = train(dataset, small_config(epochs=50, lr=1e-9, early_stop_patience=2))
    assert log.stopped_early
    assert len(log) == log.best_epoch + 2


def test_non_finite_start_raises(dataset, rng):
    theta = EmbeddingTable.xavier(dataset.num_users, dataset.num_bundles, dataset.num_items, 4, rng)
    theta.bundles[:] = np.inf
    with pytest.raises(NumericError, match='epoch 1, batch 0'):
        train(dataset, small_config(), theta=theta)


def test_overfits_planted_dataset(planted):
    cfg = TrainConfig(dim=16, lr=0.01, epochs=500, batch_size=64, precision='float64', seed=3)
    theta, log = train(planted, cfg)
    assert log.best_epoch == 500
    reps = compute_views(theta, build_graph_set(planted), cfg.layers)
    ranking = rank_all(make_scorer(reps, cfg.fusion), planted, 5, mask_policy='none', split='train')
    assert recall_at_k(ranking, planted.ub_train, 5) >= 0.9


def test_planted_loss_never_rises_between_windows(planted):
    cfg = TrainConfig(dim=16, lr=0.01, epochs=100, batch_size=64, precision='float64', seed=3,
                      contrast_mode='off', aug=AugmentationSpec(kind='none'))
    _, log = train(planted, cfg)
    totals = np.array([record.total for record in log])
    windows = totals.reshape(-1, 10).mean(axis=1)
    assert np.all(np.diff(windows) <= 0), windows


def test_training_batch_round_trips_triples():
    batch = TrainingBatch.from_triples([(0, 1, 2), (3, 4, 5)])
    assert [tuple(t) for t in batch] == [(0, 1, 2), (3, 4, 5)]
