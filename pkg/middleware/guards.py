"""
Request guards for the recommendation API
"""
from functools import wraps

from flask import current_app, jsonify


def get_recommender():
    """The Recommender attached to the running app, or None"""
    return current_app.extensions.get('recommender')


def model_required(f):
    """Require a trained model to be loaded"""
    @wraps(f)
    def decorated_function(*args, **kwargs):
        if get_recommender() is None:
            return jsonify({'error': 'No model loaded'}), 503
        return f(*args, **kwargs)
    return decorated_function


def valid_ids(f):
    """Require user_id / bundle_id route arguments to exist in the dataset"""
    @wraps(f)
    def decorated_function(*args, **kwargs):
        recommender = get_recommender()
        user_id = kwargs.get('user_id')
        bundle_id = kwargs.get('bundle_id')
        if user_id is not None and not 0 <= user_id < recommender.num_users:
            return jsonify({'error': f'User {user_id} not found'}), 404
        if bundle_id is not None and not 0 <= bundle_id < recommender.num_bundles:
            return jsonify({'error': f'Bundle {bundle_id} not found'}), 404
        return f(*args, **kwargs)
    return decorated_function
