"""
Recommendation Routes
Read-only access to a trained model
"""
from flask import Blueprint, jsonify, request

from middleware.guards import get_recommender, model_required, valid_ids
from services.data_ingest import dataset_stats

recommend_bp = Blueprint('recommend', __name__, url_prefix='/api')

MAX_K = 1000
TRUE_WORDS = {'1', 'true', 'yes', 'on'}


@recommend_bp.route('/health', methods=['GET'])
def health():
    """Liveness and model status"""
    return jsonify({'status': 'ok', 'model_loaded': get_recommender() is not None})


@recommend_bp.route('/dataset/stats', methods=['GET'])
@model_required
def stats():
    """Counts and sparsity summary of the served dataset"""
    return jsonify(dataset_stats(get_recommender().dataset).to_dict())


@recommend_bp.route('/users/<int:user_id>/recommendations', methods=['GET'])
@model_required
@valid_ids
def recommendations(user_id):
    """Top-k bundles for a user, train interactions masked"""
    raw_k = request.args.get('k', '20')
    try:
        k = int(raw_k)
    except ValueError:
        return jsonify({'error': f'k must be an integer, got {raw_k!r}'}), 400
    if not 1 <= k <= MAX_K:
        return jsonify({'error': f'k must be between 1 and {MAX_K}'}), 400

    mask_validation = request.args.get('mask_validation', 'false').lower() in TRUE_WORDS
    items = get_recommender().recommend(user_id, k=k, mask_validation=mask_validation)
    return jsonify({'user_id': user_id, 'k': k, 'recommendations': items})


@recommend_bp.route('/users/<int:user_id>/bundles/<int:bundle_id>/score', methods=['GET'])
@model_required
@valid_ids
def pair_score(user_id, bundle_id):
    """Total, ego-view and cross-view score of one user-bundle pair"""
    return jsonify(get_recommender().score(user_id, bundle_id))
