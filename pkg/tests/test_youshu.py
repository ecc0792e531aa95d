"""
Long-running checks on the Youshu dataset

Skipped unless BUNDLEGRAPH_YOUSHU_DIR points at the dataset directory.
"""
import os

import pytest

from services.data_ingest import dataset_stats, load_dataset, sparsify_bi
from services.evaluation import split_metrics
from services.fusion_scoring import make_scorer
from services.trainer import TrainConfig, train
from services.views import build_graph_set, compute_views

YOUSHU_DIR = os.environ.get('BUNDLEGRAPH_YOUSHU_DIR')

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(not YOUSHU_DIR, reason='BUNDLEGRAPH_YOUSHU_DIR is not set'),
]


@pytest.fixture(scope='module')
def youshu():
    return load_dataset(YOUSHU_DIR)


def _test_recall(dataset, cfg):
    theta, _ = train(dataset, cfg)
    reps = compute_views(theta, build_graph_set(dataset, theta.dtype), cfg.layers, cfg.pooling, cfg.views)
    return split_metrics(make_scorer(reps, cfg.fusion, cfg.scoring_mode, cfg.views), dataset, [20], threads=cfg.threads)


def test_statistics(youshu):
    stats = dataset_stats(youshu)
    assert (stats.num_users, stats.num_bundles, stats.num_items) == (8039, 4771, 32770)
    assert stats.ui_edges == 138515
    assert stats.ub_total_edges == 51377
    assert stats.avg_items_per_bundle == pytest.approx(37.03, abs=0.01)


def test_default_training_reaches_reported_accuracy(youshu):
    cfg = TrainConfig(epochs=int(os.environ.get('BUNDLEGRAPH_YOUSHU_EPOCHS', 100)), early_stop_patience=10,
                      threads=os.cpu_count() or 1)
    recall, ndcg = _test_recall(youshu, cfg)
    assert recall[20] == pytest.approx(0.2842, rel=0.1)
    assert ndcg[20] == pytest.approx(0.1693, rel=0.1)


def test_fused_contrast_degrades_less_under_bi_sparsity(youshu):
    epochs = int(os.environ.get('BUNDLEGRAPH_YOUSHU_EPOCHS', 100))
    drops = {}
    arms = {'fused_self': 'fused', 'pairwise_cross': 'per_view_sum'}
    for mode, scoring_mode in arms.items():
        cfg = TrainConfig(epochs=epochs, contrast_mode=mode, scoring_mode=scoring_mode,
                          threads=os.cpu_count() or 1)
        recalls = [_test_recall(sparsify_bi(youshu, rate, seed=2023) if rate else youshu, cfg)[0][20]
                   for rate in (0.0, 0.5, 0.8)]
        drops[mode] = (recalls[0] - recalls[-1]) / recalls[0]
    assert drops['fused_self'] < drops['pairwise_cross']
