"""
Run ledger queries
Every function works inside a request (db=None uses the request connection)
or on an explicit connection from connect()
"""
import math

from .db import get_db


def _nullable(value):
    if value is None:
        return None
    value = float(value)
    return None if math.isnan(value) else value


# Run Functions
def create_run(name, command, config_json, config_key, seed, dataset=None, output_dir=None, db=None):
    """Create a run row in 'running' state"""
    db = db if db is not None else get_db()
    cursor = db.cursor()
    cursor.execute(
        '''INSERT INTO runs (name, command, dataset, config_json, config_key, seed, output_dir)
           VALUES (?, ?, ?, ?, ?, ?, ?)''',
        (name, command, dataset, config_json, config_key, seed, output_dir)
    )
    db.commit()
    return cursor.lastrowid


def finish_run(run_id, status, best_epoch=None, db=None):
    """Mark a run finished or failed"""
    db = db if db is not None else get_db()
    db.execute(
        'UPDATE runs SET status = ?, best_epoch = ?, finished_at = CURRENT_TIMESTAMP WHERE id = ?',
        (status, best_epoch, run_id)
    )
    db.commit()


def get_runs(db=None):
    """Get all runs, newest first"""
    db = db if db is not None else get_db()
    return db.execute('SELECT * FROM runs ORDER BY id DESC').fetchall()


def get_run(run_id, db=None):
    """Get a specific run"""
    db = db if db is not None else get_db()
    return db.execute('SELECT * FROM runs WHERE id = ?', (run_id,)).fetchone()


def delete_run(run_id, db=None):
    """Delete a run with its epochs and metrics"""
    db = db if db is not None else get_db()
    db.execute('DELETE FROM runs WHERE id = ?', (run_id,))
    db.commit()


# Epoch Functions
def add_epoch(run_id, record, db=None):
    """Store one EpochRecord"""
    db = db if db is not None else get_db()
    db.execute(
        '''INSERT OR REPLACE INTO epoch_logs
           (run_id, epoch, bpr, contrast_user, contrast_bundle, reg, total, val_recall, val_ndcg, seconds)
           VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)''',
        (run_id, record.epoch, record.bpr, record.contrast_user, record.contrast_bundle, record.reg,
         record.total, _nullable(record.val_recall), _nullable(record.val_ndcg), record.seconds)
    )
    db.commit()


def get_epoch_logs(run_id, db=None):
    """Get the epoch history of a run"""
    db = db if db is not None else get_db()
    return db.execute(
        'SELECT * FROM epoch_logs WHERE run_id = ? ORDER BY epoch', (run_id,)
    ).fetchall()


# Metric Functions
def add_metrics(run_id, split, rows, db=None):
    """
    Store metric rows

    Args:
        rows: iterable of (variant, metric, k, value), see MetricsReport.metric_rows
    """
    db = db if db is not None else get_db()
    db.executemany(
        'INSERT INTO metrics (run_id, split, variant, metric, k, value) VALUES (?, ?, ?, ?, ?, ?)',
        [(run_id, split, variant, metric, int(k), float(value)) for variant, metric, k, value in rows]
    )
    db.commit()


def get_run_metrics(run_id, db=None):
    """Get every metric of a run"""
    db = db if db is not None else get_db()
    return db.execute(
        'SELECT split, variant, metric, k, value FROM metrics WHERE run_id = ? ORDER BY split, variant, metric, k',
        (run_id,)
    ).fetchall()


def average_metrics_by_config(split='test', db=None):
    """
    Mean of each metric over finished runs sharing a configuration apart from the seed

    Returns:
        rows with config_key, variant, metric, k, mean, n_runs and the seeds
    """
    db = db if db is not None else get_db()
    return db.execute('''
        SELECT r.config_key, m.variant, m.metric, m.k,
               AVG(m.value) AS mean, COUNT(DISTINCT r.id) AS n_runs,
               GROUP_CONCAT(DISTINCT r.seed) AS seeds
        FROM runs r
        JOIN metrics m ON m.run_id = r.id
        WHERE r.status = 'finished' AND r.command = 'train' AND m.split = ?
        GROUP BY r.config_key, m.variant, m.metric, m.k
        ORDER BY r.config_key, m.variant, m.metric, m.k
    ''', (split,)).fetchall()
