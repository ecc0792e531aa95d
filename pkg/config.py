"""
Application Configuration
Defaults, TOML config files and BUNDLEGRAPH_ environment overrides
"""
import copy
import json
import os
import tomllib
from dataclasses import dataclass, field

from services.augmentation import AugmentationSpec
from services.errors import ConfigError
from services.fusion_scoring import FusionCoefficients
from services.trainer import TrainConfig
from services.views import VIEWS

ENV_PREFIX = 'BUNDLEGRAPH_'
TRUE_WORDS = {'1', 'true', 'yes', 'on'}
FALSE_WORDS = {'0', 'false', 'no', 'off'}

# sections a checkpoint's config.json contributes when it is evaluated or served
SAVED_SECTIONS = ('data', 'model')


class Config:
    # Security
    SECRET_KEY = os.environ.get('SECRET_KEY') or 'dev-secret-key-change-in-production'

    # Run ledger
    LEDGER_PATH = os.environ.get('BUNDLEGRAPH_LEDGER_PATH') or 'data/bundlegraph.db'

    # Application
    DEBUG = False
    HOST = '127.0.0.1'
    PORT = 5000
    JSON_SORT_KEYS = False

    # Experiment defaults, one table per config file section
    DEFAULTS = {
        'data': {
            'path': '',
        },
        'model': {
            'dim': 64,
            'layers': 2,
            'lambda1': 1.0 / 3.0,
            'lambda2': 1.0 / 3.0,
            'lambda3': 1.0 / 3.0,
            'views': 'UB,UI,BI',
            'pooling': 'k_plus_one',
            'scoring_mode': 'fused',
        },
        'train': {
            'lr': 1e-3,
            'batch_size': 2048,
            'epochs': 100,
            'negatives_per_positive': 1,
            'tau': 0.25,
            'beta1': 0.1,
            'beta2': 1e-6,
            'contrast_mode': 'fused_self',
            'bpr_reduction': 'mean',
            'early_stop_patience': 0,
            'eval_k': 20,
        },
        'aug': {
            'kind': 'edge_dropout',
            'edge_drop_rate': 0.2,
            'message_drop_rate': 0.2,
            'noise_eps': 0.1,
            'resample': 'per_batch',
        },
        'eval': {
            'ks': '20,40',
            'mask_validation': False,
            'dispersion_pairs': 100000,
            'groups': '0,0.2,0.4,0.6,0.8,1.0',
        },
        'run': {
            'seed': 2023,
            'output_dir': 'runs/latest',
            'threads': 0,  # 0 = all available cores
            'precision': 'float32',
            'deterministic': False,
            'ledger': 'data/bundlegraph.db',
            'progress': True,
        },
    }

    @staticmethod
    def init_app(app):
        """Initialize application with this config"""
        directory = os.path.dirname(app.config['LEDGER_PATH'])
        if directory:
            os.makedirs(directory, exist_ok=True)


@dataclass(frozen=True)
class RunConfig:
    """
    One experiment: dataset, training configuration, evaluation settings and
    run flags, plus the merged values it was built from
    """
    data_path: str
    train: TrainConfig
    ks: tuple = (20, 40)
    groups: tuple = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    mask_validation: bool = False
    dispersion_pairs: int = 100000
    output_dir: str = 'runs/latest'
    ledger: str = ''
    deterministic: bool = False
    values: dict = field(default_factory=dict)

    @property
    def seed(self):
        return self.train.seed

    @property
    def threads(self):
        return self.train.threads

    @property
    def mask_policy(self):
        return 'train_valid' if self.mask_validation else 'train'

    def snapshot(self):
        """Merged values as JSON text"""
        return json.dumps(self.values, sort_keys=True)

    def config_key(self):
        """Snapshot without the seed and output location, shared by repeated-seed runs"""
        values = copy.deepcopy(self.values)
        for key in ('seed', 'output_dir', 'ledger', 'progress', 'threads'):
            values['run'].pop(key, None)
        return json.dumps(values, sort_keys=True)


# ============ Merging ============

def _coerce(section, key, value, default, errors):
    name = f"{section}.{key}"
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.strip().lower() in TRUE_WORDS | FALSE_WORDS:
            return value.strip().lower() in TRUE_WORDS
        errors.append(f"{name} must be a boolean, got {value!r}")
        return default
    if isinstance(default, int):
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            errors.append(f"{name} must be an integer, got {value!r}")
            return default
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            errors.append(f"{name} must be a number, got {value!r}")
            return default
    if isinstance(value, (list, tuple)):
        return ','.join(str(v) for v in value)
    return str(value)


def _merge(values, source, label, errors):
    """Overlay a {section: {key: value}} mapping onto values"""
    for section, table in source.items():
        if section not in Config.DEFAULTS:
            errors.append(f"{label}: unknown section [{section}]")
            continue
        if not isinstance(table, dict):
            errors.append(f"{label}: [{section}] must be a table")
            continue
        for key, value in table.items():
            if key not in Config.DEFAULTS[section]:
                errors.append(f"{label}: unknown key {section}.{key}")
                continue
            values[section][key] = _coerce(section, key, value, Config.DEFAULTS[section][key], errors)


def _env_overrides(environ):
    found = {}
    for section, table in Config.DEFAULTS.items():
        for key in table:
            name = f"{ENV_PREFIX}{section.upper()}_{key.upper()}"
            if name in environ:
                found.setdefault(section, {})[key] = environ[name]
    return found


def parse_overrides(pairs):
    """
    Turn 'section.key=value' strings into a nested mapping

    Returns:
        tuple: (mapping, list of malformed entries)
    """
    found, errors = {}, []
    for pair in pairs or ():
        name, sep, value = pair.partition('=')
        section, dot, key = name.strip().partition('.')
        if not sep or not dot or not section or not key:
            errors.append(f"--set expects section.key=value, got {pair!r}")
            continue
        found.setdefault(section, {})[key] = value.strip()
    return found, errors


def _int_list(name, text, errors):
    try:
        values = tuple(int(v) for v in str(text).split(',') if v.strip())
    except ValueError:
        errors.append(f"{name} must be comma-separated integers, got {text!r}")
        return ()
    if not values or any(v < 1 for v in values):
        errors.append(f"{name} must be a nonempty list of positive integers, got {text!r}")
    return values


def _float_list(name, text, errors):
    try:
        return tuple(float(v) for v in str(text).split(',') if v.strip())
    except ValueError:
        errors.append(f"{name} must be comma-separated numbers, got {text!r}")
        return ()


# ============ Building ============

def build_run_config(values, errors=None):
    """
    Validate merged values and build a RunConfig

    Raises:
        ConfigError listing every problem found
    """
    errors = list(errors or [])
    model, train_values, aug, evaluation, run = (
        values['model'], values['train'], values['aug'], values['eval'], values['run'])

    views = tuple(v.strip().upper() for v in model['views'].split(',') if v.strip())
    if not views:
        errors.append('model.views must enable at least one view')
    unknown = [v for v in views if v not in VIEWS]
    if unknown:
        errors.append(f"model.views has unknown views {unknown}; choose from {VIEWS}")
    views = tuple(v for v in VIEWS if v in views)

    fusion = FusionCoefficients()
    try:
        fusion = FusionCoefficients.from_config(
            model['lambda1'], model['lambda2'], model['lambda3'], views or VIEWS)
    except ConfigError as exc:
        errors.extend(exc.errors)

    ks = _int_list('eval.ks', evaluation['ks'], errors)
    groups = _float_list('eval.groups', evaluation['groups'], errors)
    if groups and (len(groups) < 2 or any(b <= a for a, b in zip(groups, groups[1:]))
                   or groups[0] > 0 or groups[-1] < 1):
        errors.append(f"eval.groups must increase strictly and cover [0, 1], got {evaluation['groups']!r}")
    if evaluation['dispersion_pairs'] < 1:
        errors.append(f"eval.dispersion_pairs must be >= 1, got {evaluation['dispersion_pairs']}")
    if run['threads'] < 0:
        errors.append(f"run.threads must be >= 0, got {run['threads']}")

    threads = run['threads'] or os.cpu_count() or 1
    precision = run['precision']
    if run['deterministic']:
        threads, precision = 1, 'float64'

    train_cfg = TrainConfig(
        dim=model['dim'],
        layers=model['layers'],
        fusion=fusion,
        tau=train_values['tau'],
        beta1=train_values['beta1'],
        beta2=train_values['beta2'],
        lr=train_values['lr'],
        batch_size=train_values['batch_size'],
        epochs=train_values['epochs'],
        negatives_per_positive=train_values['negatives_per_positive'],
        aug=AugmentationSpec(
            kind=aug['kind'],
            edge_drop_rate=aug['edge_drop_rate'],
            message_drop_rate=aug['message_drop_rate'],
            noise_eps=aug['noise_eps'],
            resample=aug['resample'],
        ),
        contrast_mode=train_values['contrast_mode'],
        seed=run['seed'],
        views=views or VIEWS,
        pooling=model['pooling'],
        scoring_mode=model['scoring_mode'],
        bpr_reduction=train_values['bpr_reduction'],
        early_stop_patience=train_values['early_stop_patience'],
        eval_k=train_values['eval_k'],
        precision=precision,
        progress=run['progress'],
        threads=threads,
    )
    errors.extend(train_cfg.validate())
    if errors:
        raise ConfigError(errors)

    return RunConfig(
        data_path=values['data']['path'],
        train=train_cfg,
        ks=tuple(sorted(set(ks))),
        groups=groups,
        mask_validation=evaluation['mask_validation'],
        dispersion_pairs=evaluation['dispersion_pairs'],
        output_dir=run['output_dir'],
        ledger=run['ledger'],
        deterministic=run['deterministic'],
        values=values,
    )


def load_saved_values(path, sections=SAVED_SECTIONS):
    """
    Read the config.json written next to a checkpoint

    Args:
        path: config.json path
        sections: sections to keep

    Returns:
        {section: {key: value}} mapping; empty when the file does not exist
    """
    if not os.path.isfile(path):
        return {}
    try:
        with open(path, encoding='utf-8') as handle:
            saved = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}")
    if not isinstance(saved, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return {section: saved[section] for section in sections if section in saved}


def load_run_config(path=None, overrides=None, environ=None, saved=None):
    """
    Merge defaults < saved run values < config file < environment < overrides

    Args:
        path: optional TOML file
        overrides: optional {section: {key: value}} mapping (CLI flags)
        environ: environment mapping, os.environ by default
        saved: optional mapping from load_saved_values

    Returns:
        RunConfig

    Raises:
        ConfigError listing every problem found
    """
    errors = []
    values = copy.deepcopy(Config.DEFAULTS)
    if saved:
        _merge(values, saved, 'saved config', errors)
    if path:
        try:
            with open(path, 'rb') as handle:
                _merge(values, tomllib.load(handle), path, errors)
        except FileNotFoundError:
            errors.append(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as exc:
            errors.append(f"{path}: {exc}")
    environ = os.environ if environ is None else environ
    _merge(values, _env_overrides(environ), 'environment', errors)
    if overrides:
        _merge(values, overrides, 'command line', errors)
    return build_run_config(values, errors)
