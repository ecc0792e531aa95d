import math

import pytest

from database import (
    add_epoch, add_metrics, average_metrics_by_config, connect, create_run, delete_run,
    finish_run, get_epoch_logs, get_run, get_run_metrics, get_runs, init_db
)
from services.trainer import EpochRecord


@pytest.fixture
def db(tmp_path):
    path = str(tmp_path / 'ledger' / 'runs.db')
    init_db(path)
    conn = connect(path)
    yield conn
    conn.close()


def _run(db, seed, key='cfg-a', recall=0.5, command='train', status='finished'):
    run_id = create_run(f"seed{seed}", command, '{}', key, seed, dataset='tiny', db=db)
    add_metrics(run_id, 'test', [('total', 'recall', 20, recall), ('total', 'ndcg', 20, recall / 2)], db=db)
    finish_run(run_id, status, best_epoch=3, db=db)
    return run_id


def test_run_lifecycle(db):
    run_id = create_run('first', 'train', '{"a": 1}', 'key', 7, db=db)
    assert get_run(run_id, db=db)['status'] == 'running'
    finish_run(run_id, 'finished', best_epoch=4, db=db)
    row = get_run(run_id, db=db)
    assert row['status'] == 'finished' and row['best_epoch'] == 4
    assert row['finished_at'] is not None
    assert [r['id'] for r in get_runs(db=db)] == [run_id]


def test_epochs_store_missing_validation_as_null(db):
    run_id = create_run('r', 'train', '{}', 'key', 1, db=db)
    add_epoch(run_id, EpochRecord(1, 0.7, 0.2, 0.3, 1.5, 0.9, math.nan, math.nan, seconds=0.1), db=db)
    add_epoch(run_id, EpochRecord(2, 0.6, 0.2, 0.3, 1.4, 0.8, 0.25, 0.1), db=db)
    rows = get_epoch_logs(run_id, db=db)
    assert [r['epoch'] for r in rows] == [1, 2]
    assert rows[0]['val_recall'] is None
    assert rows[1]['val_recall'] == 0.25


def test_deleting_a_run_cascades(db):
    run_id = _run(db, 1)
    delete_run(run_id, db=db)
    assert get_run(run_id, db=db) is None
    assert get_run_metrics(run_id, db=db) == []


def test_average_over_seeds(db):
    _run(db, 1, recall=0.4)
    _run(db, 2, recall=0.6)
    _run(db, 3, key='cfg-b', recall=0.9)
    _run(db, 4, recall=0.0, status='failed')
    _run(db, 5, recall=0.0, command='evaluate')

    rows = {(r['config_key'], r['metric']): r for r in average_metrics_by_config('test', db=db)}
    assert rows[('cfg-a', 'recall')]['mean'] == pytest.approx(0.5)
    assert rows[('cfg-a', 'recall')]['n_runs'] == 2
    assert sorted(rows[('cfg-a', 'recall')]['seeds'].split(',')) == ['1', '2']
    assert rows[('cfg-b', 'ndcg')]['mean'] == pytest.approx(0.45)
    assert average_metrics_by_config('valid', db=db) == []
