"""
Database package initialization
SQLite run ledger
"""
from .db import connect, get_db, init_db, close_db
from .models import (
    create_run, finish_run, get_runs, get_run, delete_run,
    add_epoch, get_epoch_logs,
    add_metrics, get_run_metrics, average_metrics_by_config
)

__all__ = [
    'connect', 'get_db', 'init_db', 'close_db',
    'create_run', 'finish_run', 'get_runs', 'get_run', 'delete_run',
    'add_epoch', 'get_epoch_logs',
    'add_metrics', 'get_run_metrics', 'average_metrics_by_config'
]
