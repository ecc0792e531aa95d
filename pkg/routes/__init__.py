"""
Routes package
API endpoint blueprints
"""
from .recommend import recommend_bp
from .runs import runs_bp

__all__ = ['recommend_bp', 'runs_bp']
