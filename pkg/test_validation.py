#!/usr/bin/env python3
"""
Tests for configuration parsing and checkpoint files
"""

import numpy as np
import pandas as pd
import pytest

from core.nets import ModelConfig, build_model
from utils.file_operations import CheckpointFormatError, FileOperations, decode_checkpoint, encode_checkpoint
from utils.validation import ConfigError, ConfigValidator, model_config_text


def _write(tmp_path, text, name='run.cfg'):
    path = tmp_path / name
    path.write_text(text, encoding='utf-8')
    return path


# -- configuration -----------------------------------------------------------

def test_defaults_resolve_without_a_file():
    config = ConfigValidator().parse_config(command='verify')
    assert config.model.variant == 'transformer'
    assert config.model.lam == 1.0
    assert config.model.epochs == 200
    assert config.seeds == 1
    assert config.synth.grid == 12


def test_survival_defaults_to_twenty_epochs():
    config = ConfigValidator().parse_config(flags={'task': 'survival'}, command='verify')
    assert config.model.epochs == 20


def test_command_line_flags_override_the_file(tmp_path):
    path = _write(tmp_path, "manifest = data/manifest.txt\nlambda = 2.0  # strong\nseeds=3\n")
    config = ConfigValidator().parse_config(path, {'lambda': '0.5'})
    assert config.model.lam == 0.5
    assert config.seeds == 3
    assert config.manifest == 'data/manifest.txt'


def test_negative_lambda_names_the_constraint(tmp_path):
    with pytest.raises(ConfigError, match='lambda >= 0') as info:
        ConfigValidator().parse_config(flags={'lambda': '-1'}, command='verify')
    assert info.value.line_number is None
    path = _write(tmp_path, "seed=1\nlambda=-1\n")
    with pytest.raises(ConfigError) as info:
        ConfigValidator().parse_config(path, command='verify')
    assert info.value.line_number == 2


def test_unknown_keys_and_bad_values_name_the_line(tmp_path):
    with pytest.raises(ConfigError, match='unknown key') as info:
        ConfigValidator().parse_config(_write(tmp_path, "seed=1\n\nlearning_rate=0.1\n"), command='verify')
    assert (info.value.key, info.value.line_number) == ('learning_rate', 3)
    with pytest.raises(ConfigError, match='cannot parse'):
        ConfigValidator().parse_config(_write(tmp_path, "epochs=many\n"), command='verify')
    with pytest.raises(ConfigError, match='expected key=value'):
        ConfigValidator().parse_config(_write(tmp_path, "epochs 3\n"), command='verify')
    with pytest.raises(ConfigError):
        ConfigValidator().parse_config(flags={'arch': 'rnn'}, command='verify')


def test_commands_require_their_inputs():
    with pytest.raises(ConfigError, match='manifest'):
        ConfigValidator().parse_config(command='train')
    with pytest.raises(ConfigError, match='checkpoint'):
        ConfigValidator().parse_config(flags={'manifest': 'm.txt'}, command='eval')
    ConfigValidator().parse_config(command='synth')


def test_blob_sides_are_checked_against_the_grid():
    with pytest.raises(ConfigError):
        ConfigValidator().parse_config(flags={'grid': '3', 'blob_max': '4'}, command='verify')


def test_lambda_sweep_list():
    config = ConfigValidator().parse_config(flags={'lambdas': '0,0.5, 1'}, command='verify')
    assert config.lambdas == [0.0, 0.5, 1.0]


def test_run_parameter_warnings():
    values = ConfigValidator().parse_config(flags={'arch': 'mean', 'lambda': '20'}, command='verify').values
    results = ConfigValidator().validate_run_parameters(values)
    assert results['is_valid']
    assert len(results['warnings']) == 3


@pytest.mark.parametrize('arch', ['abmil', 'mean', 'max'])
def test_baselines_warn_that_ppeg_is_ignored(arch):
    validator = ConfigValidator()
    values = validator.parse_config(flags={'arch': arch, 'lambda': '0'}, command='verify').values
    warnings = validator.validate_run_parameters(values)['warnings']
    assert any('PPEG' in w and arch in w for w in warnings)
    values = validator.parse_config(flags={'arch': arch, 'lambda': '0', 'pe': 'none'}, command='verify').values
    assert validator.validate_run_parameters(values)['warnings'] == []


def test_model_config_text_round_trips(tmp_path):
    original = ModelConfig(variant='cnn', input_dim=7, embed_dim=16, attn_dim=8, lam=0.25, pe_mode='sinusoidal',
                           task='survival', bins=5, lr=1e-3, epochs=3, step_mode='sequential',
                           shuffled_task_loss=True, alpha=0.1, seed=9)
    path = _write(tmp_path, model_config_text(original), 'model.cfg')
    assert ConfigValidator().parse_config(path, command='load').model == original


# -- checkpoints -------------------------------------------------------------

def _model():
    return build_model(ModelConfig(variant='abmil', input_dim=4, embed_dim=6, attn_dim=3, pe_mode='none', epochs=1))


def test_checkpoint_round_trip_in_single_precision(tmp_path):
    files = FileOperations(tmp_path)
    state = _model().state_dict()
    path = files.save_checkpoint(state, tmp_path / 'ckpt' / 'model.jmwt', config_text='arch=abmil\n')
    loaded = files.load_checkpoint(path)
    assert list(loaded) == list(state)
    for name, value in state.items():
        assert loaded[name].dtype == np.float32
        assert np.array_equal(loaded[name], value.astype(np.float32))
    assert (tmp_path / 'ckpt' / 'model.jmwt.cfg').read_text(encoding='utf-8') == 'arch=abmil\n'


def test_checkpoint_keeps_scalars():
    decoded = decode_checkpoint(encode_checkpoint({'scale': np.array(2.5)}))
    assert decoded['scale'].shape == ()
    assert float(decoded['scale']) == 2.5


def test_corrupt_checkpoints_are_rejected():
    payload = encode_checkpoint(_model().state_dict())
    with pytest.raises(CheckpointFormatError) as info:
        decode_checkpoint(b'NOPE' + payload[4:])
    assert info.value.offset == 0
    with pytest.raises(CheckpointFormatError, match='truncated'):
        decode_checkpoint(payload[:-3])
    single = encode_checkpoint({'w': np.ones(2)})
    with pytest.raises(CheckpointFormatError, match='duplicate'):
        decode_checkpoint(single + single[8:])


def test_jsonl_and_tables(tmp_path):
    files = FileOperations(tmp_path)
    path = files.write_jsonl([{'epoch': 1, 'loss': np.float32(0.5)}, {'epoch': 2, 'loss': 0.25}],
                             tmp_path / 'reports' / 'run.jsonl')
    assert files.read_jsonl(path) == [{'epoch': 1, 'loss': 0.5}, {'epoch': 2, 'loss': 0.25}]
    written = files.save_table(pd.DataFrame({'a': [1, 2]}), 'table')
    assert set(written) == {'txt', 'csv'}
    assert pd.read_csv(written['csv'])['a'].tolist() == [1, 2]
