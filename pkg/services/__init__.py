"""
Services package
Data loading, graph kernels, training and evaluation
"""
from .errors import BundleGraphError, ConfigError, DataError, NumericError, ShapeError
from .data_ingest import (
    InteractionMatrix, Dataset, StatisticsRecord, load_dataset, write_dataset,
    dataset_stats, bundle_sparsity_rates, sparsify_bi
)
from .sparse_graph import normalize, propagate, layer_pool, mean_aggregate
from .views import (
    VIEWS, EmbeddingTable, ViewRepresentations, build_graph_set,
    compute_ub_view, compute_ui_view, compute_bi_view, compute_views
)
from .checkpoint import save_checkpoint, load_checkpoint
from .augmentation import AugmentationSpec, drop_edges, message_dropout, add_noise, sample_draw
from .fusion_scoring import FusionCoefficients, fuse, score, decompose_score, make_scorer
from .objective import (
    LossBreakdown, bpr_loss, info_nce, pairwise_cross_contrast, l2_reg, compute_gradients
)
from .trainer import TrainConfig, TrainingBatch, sample_batch, adam_step, train
from .evaluation import (
    RankingResult, MetricsReport, rank_all, recall_at_k, ndcg_at_k,
    group_hit_analysis, decomposed_eval, alignment_dispersion, evaluate_embeddings
)
from .recommender import Recommender

__all__ = [
    'BundleGraphError', 'ConfigError', 'DataError', 'NumericError', 'ShapeError',
    'InteractionMatrix', 'Dataset', 'StatisticsRecord', 'load_dataset', 'write_dataset',
    'dataset_stats', 'bundle_sparsity_rates', 'sparsify_bi',
    'normalize', 'propagate', 'layer_pool', 'mean_aggregate',
    'VIEWS', 'EmbeddingTable', 'ViewRepresentations', 'build_graph_set',
    'compute_ub_view', 'compute_ui_view', 'compute_bi_view', 'compute_views',
    'save_checkpoint', 'load_checkpoint',
    'AugmentationSpec', 'drop_edges', 'message_dropout', 'add_noise', 'sample_draw',
    'FusionCoefficients', 'fuse', 'score', 'decompose_score', 'make_scorer',
    'LossBreakdown', 'bpr_loss', 'info_nce', 'pairwise_cross_contrast', 'l2_reg', 'compute_gradients',
    'TrainConfig', 'TrainingBatch', 'sample_batch', 'adam_step', 'train',
    'RankingResult', 'MetricsReport', 'rank_all', 'recall_at_k', 'ndcg_at_k',
    'group_hit_analysis', 'decomposed_eval', 'alignment_dispersion', 'evaluate_embeddings',
    'Recommender',
]
