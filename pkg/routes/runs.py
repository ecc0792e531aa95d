"""
Run Routes
Training and evaluation history from the run ledger
"""
import json

from flask import Blueprint, jsonify

from database.models import get_epoch_logs, get_run, get_run_metrics, get_runs

runs_bp = Blueprint('runs', __name__, url_prefix='/api/runs')


def _run_summary(run):
    summary = dict(run)
    summary.pop('config_json', None)
    summary.pop('config_key', None)
    return summary


@runs_bp.route('', methods=['GET'])
def list_runs():
    """Get all recorded runs"""
    return jsonify([_run_summary(r) for r in get_runs()])


@runs_bp.route('/<int:run_id>', methods=['GET'])
def run_detail(run_id):
    """Get one run with its configuration, epoch log and metrics"""
    run = get_run(run_id)
    if not run:
        return jsonify({'error': 'Run not found'}), 404

    return jsonify({
        'run': _run_summary(run),
        'config': json.loads(run['config_json']),
        'epochs': [dict(e) for e in get_epoch_logs(run_id)],
        'metrics': [dict(m) for m in get_run_metrics(run_id)],
    })
