"""
Recommender
A trained model held in memory: the dataset, the per-view representations and
the scorer, answering top-K and single-pair score queries
"""
import logging

import numpy as np

from services.checkpoint import check_checkpoint_shape, load_checkpoint
from services.data_ingest import load_dataset
from services.evaluation import rank_all
from services.fusion_scoring import decompose_score, make_scorer
from services.views import build_graph_set, compute_views

logger = logging.getLogger(__name__)


class Recommender:
    """
    Serves recommendations from an embedding table

    Args:
        dataset: Dataset the table was trained on
        theta: EmbeddingTable
        model: TrainConfig (layers, pooling, views, fusion, scoring_mode)
    """

    def __init__(self, dataset, theta, model):
        check_checkpoint_shape(theta, dataset)
        self.dataset = dataset
        self.model = model
        self.graphs = build_graph_set(dataset, theta.dtype)
        self.reps = compute_views(theta, self.graphs, model.layers, model.pooling, model.views)
        self.scorer = make_scorer(self.reps, model.fusion, model.scoring_mode, model.views)

    @classmethod
    def from_files(cls, data_dir, checkpoint_path, model):
        """Load the dataset and checkpoint from disk"""
        dataset = load_dataset(data_dir)
        theta, _ = load_checkpoint(checkpoint_path, dtype=model.dtype)
        logger.info(f"Loaded checkpoint {checkpoint_path} for dataset {dataset.name}")
        return cls(dataset, theta, model)

    @property
    def num_users(self):
        return self.dataset.num_users

    @property
    def num_bundles(self):
        return self.dataset.num_bundles

    def recommend(self, user_id, k=20, mask_validation=False):
        """
        Top-k bundles for one user with their scores; train bundles are masked

        Returns:
            list of dicts with bundle_id and score
        """
        policy = 'train_valid' if mask_validation else 'train'
        ranking = rank_all(self.scorer, self.dataset, k, policy, users=[user_id])
        bundles, scores = ranking.for_user(user_id)
        return [
            {'bundle_id': int(b), 'score': float(s)}
            for b, s in zip(bundles, scores)
        ]

    def score(self, user_id, bundle_id):
        """Total, ego-view and cross-view parts of one user-bundle score"""
        parts = decompose_score(
            self.reps, self.model.fusion, user_id, bundle_id, self.model.scoring_mode, self.model.views
        )
        return {
            'user_id': int(user_id),
            'bundle_id': int(bundle_id),
            'total': parts.total,
            'ego': parts.ego,
            'cross': parts.cross,
            'interacted': bool(self.dataset.ub_train.contains(np.array([user_id]), np.array([bundle_id]))[0]),
        }
