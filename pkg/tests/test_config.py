import json

import pytest

from config import Config, load_run_config, load_saved_values, parse_overrides
from services.errors import ConfigError


def _write(tmp_path, text):
    path = tmp_path / 'run.toml'
    path.write_text(text)
    return str(path)


def test_defaults():
    cfg = load_run_config(environ={})
    assert cfg.train.dim == 64 and cfg.train.layers == 2
    assert cfg.train.tau == 0.25 and cfg.train.lr == 1e-3
    assert cfg.ks == (20, 40)
    assert cfg.seed == 2023
    assert cfg.mask_policy == 'train'
    assert cfg.train.views == ('UB', 'UI', 'BI')
    assert cfg.threads >= 1


def test_toml_file_overrides_defaults(tmp_path):
    path = _write(tmp_path, """
[model]
dim = 32
views = ["UB", "BI"]
lambda1 = 0.5
lambda2 = 0.3
lambda3 = 0.2

[aug]
kind = "noise"
noise_eps = 0.05
""")
    cfg = load_run_config(path, environ={})
    assert cfg.train.dim == 32
    assert cfg.train.views == ('UB', 'BI')
    assert cfg.train.fusion.as_array().tolist() == pytest.approx([0.5 / 0.7, 0.0, 0.2 / 0.7])
    assert cfg.train.aug.kind == 'noise' and cfg.train.aug.noise_eps == 0.05


def test_precedence(tmp_path):
    path = _write(tmp_path, '[model]\ndim = 32\nlayers = 3\n[train]\nepochs = 7\n')
    environ = {'BUNDLEGRAPH_MODEL_DIM': '16', 'BUNDLEGRAPH_TRAIN_EPOCHS': '9'}
    cfg = load_run_config(path, overrides={'model': {'dim': '8'}}, environ=environ)
    assert cfg.train.dim == 8
    assert cfg.train.epochs == 9
    assert cfg.train.layers == 3


def test_every_problem_is_reported(tmp_path):
    path = _write(tmp_path, """
[model]
dim = 0
lambda1 = 0.9

[train]
tau = -1.0
colour = "red"

[eval]
ks = "20,x"
""")
    with pytest.raises(ConfigError) as info:
        load_run_config(path, environ={})
    text = '\n'.join(info.value.errors)
    assert 'model.dim' in text
    assert 'sum to 1' in text
    assert 'train.tau' in text
    assert 'train.colour' in text
    assert 'eval.ks' in text
    assert info.value.exit_code == 2


def test_bad_types_and_missing_file(tmp_path):
    with pytest.raises(ConfigError, match='integer'):
        load_run_config(overrides={'train': {'epochs': 'many'}}, environ={})
    with pytest.raises(ConfigError, match='not found'):
        load_run_config(str(tmp_path / 'absent.toml'), environ={})
    with pytest.raises(ConfigError, match='unknown section'):
        load_run_config(overrides={'optimizer': {'lr': '1'}}, environ={})


def test_deterministic_forces_one_thread_and_float64():
    cfg = load_run_config(overrides={'run': {'deterministic': 'true', 'threads': '8'}}, environ={})
    assert cfg.threads == 1
    assert cfg.train.precision == 'float64'


def test_parse_overrides():
    found, errors = parse_overrides(['train.lr=0.01', 'model.dim = 16', 'broken', 'nosection=1'])
    assert found == {'train': {'lr': '0.01'}, 'model': {'dim': '16'}}
    assert len(errors) == 2


def test_config_key_ignores_seed_and_location():
    first = load_run_config(overrides={'run': {'seed': '1', 'output_dir': 'a'}}, environ={})
    second = load_run_config(overrides={'run': {'seed': '2', 'output_dir': 'b'}}, environ={})
    assert first.config_key() == second.config_key()
    assert first.snapshot() != second.snapshot()
    assert json.loads(first.snapshot())['run']['seed'] == 1


def test_defaults_table_covers_every_section():
    assert set(Config.DEFAULTS) == {'data', 'model', 'train', 'aug', 'eval', 'run'}


def test_saved_values_sit_below_file_and_flags(tmp_path):
    saved_path = tmp_path / 'config.json'
    saved_path.write_text(json.dumps({
        'data': {'path': 'data/Youshu'},
        'model': {'views': 'UB', 'dim': 16, 'scoring_mode': 'per_view_sum'},
        'train': {'epochs': 7},
    }))
    saved = load_saved_values(str(saved_path))
    assert set(saved) == {'data', 'model'}

    cfg = load_run_config(environ={}, saved=saved)
    assert cfg.data_path == 'data/Youshu'
    assert cfg.train.views == ('UB',) and cfg.train.scoring_mode == 'per_view_sum'
    assert cfg.train.epochs == 100

    path = _write(tmp_path, '[model]\ndim = 24\n')
    cfg = load_run_config(path, {'model': {'views': 'UB,UI'}}, environ={}, saved=saved)
    assert cfg.train.dim == 24 and cfg.train.views == ('UB', 'UI')


def test_missing_or_broken_saved_values(tmp_path):
    assert load_saved_values(str(tmp_path / 'absent.json')) == {}
    broken = tmp_path / 'config.json'
    broken.write_text('{not json')
    with pytest.raises(ConfigError):
        load_saved_values(str(broken))
