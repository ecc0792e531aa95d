"""
bundlegraph command line
Train, evaluate, sparsify and describe bundle datasets; serve a trained model
"""
import functools
import json
import logging
import os
import shutil
import sqlite3
import sys
from dataclasses import replace

import click

from config import Config, load_run_config, load_saved_values, parse_overrides
from database import models
from database.db import connect, init_db
from services import trainer
from services.checkpoint import check_checkpoint_shape, load_checkpoint, save_checkpoint
from services.data_ingest import (
    dataset_stats, load_dataset, sparsified_dir_name, sparsify_bi, write_dataset, write_stats_report
)
from services.errors import BundleGraphError, ConfigError, DataError
from services.evaluation import evaluate_embeddings
from services.recommender import Recommender
from services.views import build_graph_set

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = 'checkpoint.txt'
LOG_FILE = 'train_log.tsv'
CONFIG_FILE = 'config.json'
STATS_FILE = 'stats.txt'

# option name -> (section, key)
CONFIG_FLAGS = {
    'data': ('data', 'path'),
    'views': ('model', 'views'),
    'dim': ('model', 'dim'),
    'layers': ('model', 'layers'),
    'scoring_mode': ('model', 'scoring_mode'),
    'contrast_mode': ('train', 'contrast_mode'),
    'epochs': ('train', 'epochs'),
    'lr': ('train', 'lr'),
    'batch_size': ('train', 'batch_size'),
    'aug': ('aug', 'kind'),
    'ks': ('eval', 'ks'),
    'seed': ('run', 'seed'),
    'output_dir': ('run', 'output_dir'),
    'threads': ('run', 'threads'),
    'ledger': ('run', 'ledger'),
}


def handle_errors(f):
    """Map the error hierarchy to messages on stderr and exit codes"""
    @functools.wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except ConfigError as exc:
            for message in exc.errors:
                click.echo(f"config error: {message}", err=True)
            sys.exit(exc.exit_code)
        except BundleGraphError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)
    return decorated_function


def config_options(f):
    """Options shared by every command that builds a RunConfig"""
    options = [
        click.option('--config', 'config_path', type=click.Path(dir_okay=False),
                     help='TOML config file'),
        click.option('--set', 'set_values', multiple=True, metavar='SECTION.KEY=VALUE',
                     help='Override any config value (repeatable)'),
        click.option('--data', type=click.Path(file_okay=False), help='Dataset directory'),
        click.option('--views', help='Enabled views, e.g. UB,UI,BI'),
        click.option('--dim', type=int, help='Embedding size'),
        click.option('--layers', type=int, help='Propagation layers'),
        click.option('--scoring-mode', help='fused, per_view_sum, ego_only or cross_only '
                     '(per_view_sum is late fusion)'),
        click.option('--contrast-mode', help='fused_self, pairwise_cross or off; the late-fusion '
                     'baseline is pairwise_cross with --scoring-mode per_view_sum'),
        click.option('--epochs', type=int),
        click.option('--lr', type=float),
        click.option('--batch-size', type=int),
        click.option('--aug', help='none, edge_dropout, message_dropout or noise'),
        click.option('--ks', help='Evaluation cutoffs, e.g. 20,40'),
        click.option('--seed', type=int),
        click.option('--output-dir', type=click.Path(file_okay=False)),
        click.option('--threads', type=int, help='Worker threads (1 is deterministic)'),
        click.option('--ledger', help="Run ledger database ('' disables)"),
        click.option('--deterministic', is_flag=True, help='Single thread, float64'),
        click.option('--mask-validation', is_flag=True, help='Also mask validation bundles'),
        click.option('--no-progress', is_flag=True, help='Hide progress bars'),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _run_config(options, extra=None, saved=None):
    """Build the RunConfig from config options; consumes them from options"""
    overrides, errors = parse_overrides(options.pop('set_values', ()))
    if errors:
        raise ConfigError(errors)
    for name, (section, key) in CONFIG_FLAGS.items():
        value = options.pop(name, None)
        if value is not None:
            overrides.setdefault(section, {})[key] = value
    if options.pop('deterministic', False):
        overrides.setdefault('run', {})['deterministic'] = True
    if options.pop('mask_validation', False):
        overrides.setdefault('eval', {})['mask_validation'] = True
    if options.pop('no_progress', False):
        overrides.setdefault('run', {})['progress'] = False
    for section, table in (extra or {}).items():
        overrides.setdefault(section, {}).update(table)

    run_config = load_run_config(options.pop('config_path', None), overrides, saved=saved)
    if run_config.train.progress and not sys.stderr.isatty():
        run_config = replace(run_config, train=replace(run_config.train, progress=False))
    return run_config


def _saved_values(checkpoint, ignore):
    """Model and data values train wrote next to the checkpoint"""
    if ignore or not checkpoint:
        return None
    path = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), CONFIG_FILE)
    saved = load_saved_values(path)
    if saved:
        logger.info(f"Using model settings from {path}")
    return saved


def _require_data(run_config):
    if not run_config.data_path:
        raise ConfigError('data.path is required (--data or [data] path)')
    return load_dataset(run_config.data_path)


class RunRecorder:
    """
    Writes a run to the ledger

    Ledger failures are logged and recording stops; the run itself continues.
    """

    def __init__(self, path):
        self.db = None
        self.run_id = None
        if not path:
            return
        try:
            init_db(path)
            self.db = connect(path)
        except sqlite3.Error as exc:
            logger.warning(f"Run ledger unavailable ({exc}); continuing without it")

    def _guard(self, action, *args, **kwargs):
        if self.db is None:
            return None
        try:
            return action(*args, db=self.db, **kwargs)
        except sqlite3.Error as exc:
            logger.warning(f"Run ledger write failed ({exc}); continuing without it")
            self.db = None
            return None

    def start(self, name, command, run_config, dataset):
        self.run_id = self._guard(
            models.create_run, name, command, run_config.snapshot(), run_config.config_key(),
            run_config.seed, dataset=run_config.data_path, output_dir=run_config.output_dir)
        if self.run_id is not None:
            logger.info(f"Recording {command} run {self.run_id} for {dataset.name}")

    def epoch(self, record):
        if self.run_id is not None:
            self._guard(models.add_epoch, self.run_id, record)

    def metrics(self, split, rows):
        if self.run_id is not None:
            self._guard(models.add_metrics, self.run_id, split, rows)

    def finish(self, status, best_epoch=None):
        if self.run_id is not None:
            self._guard(models.finish_run, self.run_id, status, best_epoch)
        if self.db is not None:
            self.db.close()
            self.db = None


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Debug logging')
@click.option('--quiet', '-q', is_flag=True, help='Warnings and errors only')
def cli(verbose, quiet):
    """Multi-view graph bundle recommendation"""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format='%(asctime)s - %(levelname)s - %(message)s')
    logging.getLogger().setLevel(level)


@cli.command()
@config_options
@click.option('--name', default=None, help='Run name recorded in the ledger')
@handle_errors
def train(name, **options):
    """Train a model, then write checkpoint, training log and test report"""
    run_config = _run_config(options)
    dataset = _require_data(run_config)
    out = run_config.output_dir

    recorder = RunRecorder(run_config.ledger)
    recorder.start(name or os.path.basename(os.path.normpath(out)), 'train', run_config, dataset)
    try:
        theta, log = trainer.train(dataset, run_config.train, on_epoch=recorder.epoch)
    except BundleGraphError:
        recorder.finish('failed')
        raise

    os.makedirs(out, exist_ok=True)
    save_checkpoint(theta, os.path.join(out, CHECKPOINT_FILE), seed=run_config.seed)
    log.write(os.path.join(out, LOG_FILE))
    with open(os.path.join(out, CONFIG_FILE), 'w', encoding='utf-8') as handle:
        json.dump(run_config.values, handle, indent=2, sort_keys=True)

    report = evaluate_embeddings(
        theta, build_graph_set(dataset, theta.dtype), dataset, run_config.train,
        split='test', ks=run_config.ks, mask_policy=run_config.mask_policy,
        threads=run_config.threads,
    )
    text_path, _ = report.write(out)
    logger.info(f"Best epoch {log.best_epoch}; report written to {text_path}")
    for line in report.as_lines():
        click.echo(line)

    recorder.metrics('test', report.metric_rows())
    recorder.finish('finished', log.best_epoch)


@cli.command()
@config_options
@click.option('--checkpoint', required=True, type=click.Path(dir_okay=False), help='Checkpoint file')
@click.option('--split', type=click.Choice(['test', 'valid']), default='test')
@click.option('--decompose', is_flag=True, help='Also rank by ego-view and cross-view scores')
@click.option('--groups', default=None, help='Sparsity group edges, e.g. 0,0.2,0.4,0.6,0.8,1.0')
@click.option('--group-analysis', is_flag=True, help='Group analysis with the configured eval.groups')
@click.option('--diagnostics', is_flag=True, help='Cross-view alignment and dispersion')
@click.option('--report-dir', type=click.Path(file_okay=False), default=None,
              help='Also write metrics.txt / metrics.tsv here')
@click.option('--ignore-saved-config', is_flag=True,
              help=f'Do not read model settings from the {CONFIG_FILE} next to the checkpoint')
@handle_errors
def evaluate(checkpoint, split, decompose, groups, group_analysis, diagnostics, report_dir,
             ignore_saved_config, **options):
    """Evaluate a checkpoint with the all-ranking protocol"""
    run_config = _run_config(
        options, extra={'eval': {'groups': groups}} if groups else None,
        saved=_saved_values(checkpoint, ignore_saved_config),
    )
    dataset = _require_data(run_config)
    theta, _ = load_checkpoint(checkpoint, dtype=run_config.train.dtype)
    check_checkpoint_shape(theta, dataset)

    recorder = RunRecorder(run_config.ledger)
    recorder.start(os.path.basename(checkpoint), 'evaluate', run_config, dataset)
    report = evaluate_embeddings(
        theta, build_graph_set(dataset, theta.dtype), dataset, run_config.train,
        split=split, ks=run_config.ks, mask_policy=run_config.mask_policy,
        decompose=decompose,
        groups=run_config.groups if (groups or group_analysis) else None,
        diagnostics=diagnostics, dispersion_pairs=run_config.dispersion_pairs,
        rng=trainer.rng_stream(run_config.seed, 'evaluation'),
        threads=run_config.threads,
    )
    if report_dir:
        report.write(report_dir)
    for line in report.as_lines():
        click.echo(line)

    recorder.metrics(split, report.metric_rows())
    recorder.finish('finished')


@cli.command()
@click.option('--data', required=True, type=click.Path(file_okay=False), help='Source dataset directory')
@click.option('--drop-rate', required=True, type=float, help='Fraction of bundle-item edges to drop')
@click.option('--seed', default=Config.DEFAULTS['run']['seed'], type=int, show_default=True)
@click.option('--out', default=None, help='Target directory (default <data>_bi_drop<rate>_s<seed>)')
@click.option('--force', is_flag=True, help='Replace an existing target directory')
@handle_errors
def sparsify(data, drop_rate, seed, out, force):
    """Derive a dataset with a uniformly sparsified bundle-item graph"""
    if not 0.0 <= drop_rate < 1.0:
        raise ConfigError(f"--drop-rate must be in [0, 1), got {drop_rate}")
    target = out or sparsified_dir_name(data, drop_rate, seed)
    if os.path.exists(target) and not force:
        raise DataError(f"{target} already exists; pass --force to replace it")

    dataset = load_dataset(data)
    derived = sparsify_bi(dataset, drop_rate, seed)
    if os.path.exists(target):
        shutil.rmtree(target)
    write_dataset(derived, target)
    logger.info(f"Kept {derived.bi.num_edges} of {dataset.bi.num_edges} bundle-item edges")
    click.echo(f"output={target}")
    click.echo(f"bi_edges={derived.bi.num_edges}")


@cli.command()
@click.option('--data', required=True, type=click.Path(file_okay=False), help='Dataset directory')
@click.option('--out', default=None, help=f'Also write the statistics to this file (e.g. {STATS_FILE})')
@handle_errors
def stats(data, out):
    """Print dataset statistics"""
    record = dataset_stats(load_dataset(data))
    if out:
        write_stats_report(record, out)
    for line in record.as_lines():
        click.echo(line)


@cli.command()
@config_options
@click.option('--checkpoint', default=None, type=click.Path(dir_okay=False), help='Checkpoint to serve')
@click.option('--host', default=Config.HOST, show_default=True)
@click.option('--port', default=Config.PORT, type=int, show_default=True)
@click.option('--ignore-saved-config', is_flag=True,
              help=f'Do not read model settings from the {CONFIG_FILE} next to the checkpoint')
@handle_errors
def serve(checkpoint, host, port, ignore_saved_config, **options):
    """Serve recommendations over HTTP"""
    from app import create_app

    run_config = _run_config(options, saved=_saved_values(checkpoint, ignore_saved_config))
    recommender = None
    if checkpoint:
        if not run_config.data_path:
            raise ConfigError('serving a checkpoint needs data.path')
        recommender = Recommender.from_files(run_config.data_path, checkpoint, run_config.train)
    app = create_app(recommender, ledger_path=run_config.ledger or None)
    app.run(host=host, port=port, debug=Config.DEBUG)


@cli.command()
@click.option('--ledger', default=Config.DEFAULTS['run']['ledger'], show_default=True)
@click.option('--group-by-config', is_flag=True, help='Average test metrics over seeds of one config')
@click.option('--split', type=click.Choice(['test', 'valid']), default='test')
@handle_errors
def runs(ledger, group_by_config, split):
    """List recorded runs"""
    if not os.path.isfile(ledger):
        raise DataError(f"Run ledger not found: {ledger}")
    db = connect(ledger)
    try:
        if group_by_config:
            _echo_groups(models.average_metrics_by_config(split, db=db))
            return
        for run in models.get_runs(db=db):
            metrics = models.get_run_metrics(run['id'], db=db)
            parts = [
                f"run={run['id']}", f"name={run['name']}", f"command={run['command']}",
                f"status={run['status']}", f"seed={run['seed']}", f"best_epoch={run['best_epoch']}",
            ]
            parts += [
                f"{m['metric']}@{m['k']}={m['value']:.6f}"
                for m in metrics if m['split'] == split and m['variant'] == 'total'
            ]
            click.echo(' '.join(parts))
    finally:
        db.close()


def _echo_groups(rows):
    keys = []
    lines = {}
    for row in rows:
        if row['config_key'] not in lines:
            keys.append(row['config_key'])
            lines[row['config_key']] = [f"n_runs={row['n_runs']}", f"seeds={row['seeds']}"]
        prefix = '' if row['variant'] == 'total' else f"{row['variant']}."
        lines[row['config_key']].append(f"{prefix}{row['metric']}@{row['k']}={row['mean']:.6f}")
    for index, key in enumerate(keys, start=1):
        click.echo(f"config={index} " + ' '.join(lines[key]))
        logger.debug(f"config {index}: {key}")


if __name__ == '__main__':
    cli()
