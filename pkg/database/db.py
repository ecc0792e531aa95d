"""
Database connection and initialization for the run ledger
"""
import logging
import os
import sqlite3

from flask import current_app, g

from config import Config

logger = logging.getLogger(__name__)


def connect(path=None):
    """Open a ledger connection outside a request"""
    path = path or Config.LEDGER_PATH
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    conn = sqlite3.connect(path)
    conn.row_factory = sqlite3.Row
    conn.execute('PRAGMA foreign_keys = ON')
    return conn


def get_db():
    """Get database connection"""
    if 'db' not in g:
        g.db = connect(current_app.config['LEDGER_PATH'])
    return g.db


def close_db(e=None):
    """Close database connection"""
    db = g.pop('db', None)
    if db is not None:
        db.close()


def init_db(path=None):
    """Create the ledger schema if missing"""
    conn = connect(path)
    c = conn.cursor()

    # ============ Runs ============

    c.execute('''CREATE TABLE IF NOT EXISTS runs (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        name TEXT NOT NULL,
        command TEXT NOT NULL,
        dataset TEXT,
        config_json TEXT NOT NULL,
        config_key TEXT NOT NULL,
        seed INTEGER NOT NULL,
        status TEXT NOT NULL DEFAULT 'running',
        best_epoch INTEGER,
        output_dir TEXT,
        started_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
        finished_at TIMESTAMP
    )''')

    # ============ Training History ============

    c.execute('''CREATE TABLE IF NOT EXISTS epoch_logs (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        run_id INTEGER NOT NULL,
        epoch INTEGER NOT NULL,
        bpr REAL,
        contrast_user REAL,
        contrast_bundle REAL,
        reg REAL,
        total REAL,
        val_recall REAL,
        val_ndcg REAL,
        seconds REAL,
        FOREIGN KEY (run_id) REFERENCES runs (id) ON DELETE CASCADE,
        UNIQUE(run_id, epoch)
    )''')

    # ============ Metrics ============

    c.execute('''CREATE TABLE IF NOT EXISTS metrics (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        run_id INTEGER NOT NULL,
        split TEXT NOT NULL,
        variant TEXT NOT NULL DEFAULT 'total',
        metric TEXT NOT NULL,
        k INTEGER NOT NULL,
        value REAL NOT NULL,
        FOREIGN KEY (run_id) REFERENCES runs (id) ON DELETE CASCADE
    )''')

    c.execute('CREATE INDEX IF NOT EXISTS idx_runs_config_key ON runs (config_key)')
    conn.commit()
    conn.close()
    logger.debug(f"Run ledger ready at {path or Config.LEDGER_PATH}")
