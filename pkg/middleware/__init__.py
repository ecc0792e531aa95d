"""
Middleware package
Request guards for the recommendation API
"""
from .guards import get_recommender, model_required, valid_ids

__all__ = ['get_recommender', 'model_required', 'valid_ids']
