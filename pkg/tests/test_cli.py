import csv
import glob
import json
import math
import os

import pytest

from src import cli
from src.architectures import build_model
from src.checkpoint import load_checkpoint
from src.cli import RunConfig, apply_overrides, main, parse_config, run_command, run_id, use_peak_lr
from src.errors import ConfigError

CONFIG_DIR = os.path.join(os.path.dirname(__file__), '..', 'config')


def _document(mnist_dir, **overrides):
    document = {
        'arch': {'kind': 'mlp', 'widths': [784, 16, 10]},
        'dataset': {'name': 'mnist', 'data_dir': mnist_dir},
        'init': 'gradinit',
        'gradinit': {'iterations': 3, 'batch_size': 32},
        'train': {'epochs': 1, 'batch_size': 64},
        'diagnostics': {'batches': 2, 'batch_size': 32, 'probe_n': 16, 'probe_d': 2, 'probe_trials': 100,
                        'probe_alphas': [0.5, 2.0], 'gradcheck_trials': 1},
    }
    document.update(overrides)
    return document


def _write(tmp_path, document):
    path = str(tmp_path / 'run.json')
    with open(path, 'w') as f:
        json.dump(document, f)
    return path


def _only_run_dir(out):
    dirs = glob.glob(os.path.join(out, '*'))
    assert len(dirs) == 1
    return dirs[0]


@pytest.mark.parametrize('name', ['mnist_mlp.json', 'cifar_plaincnn.json', 'resnet_bn.json',
                                  'resnet_nobn.json', 'transformer_copy.json'])
def test_shipped_configs_validate(name):
    config = parse_config(os.path.join(CONFIG_DIR, name))
    assert isinstance(config, RunConfig)
    assert config.to_dict()['arch']['kind'] == config.arch.kind


def test_gradinit_defaults_follow_training():
    config = parse_config(document={
        'arch': {'kind': 'mlp', 'widths': [784, 10]},
        'init': 'gradinit',
        'train': {'optimizer': 'adam', 'lr': 1e-3},
    })
    assert config.gradinit.algo == 'adam'
    assert config.gradinit.lr == 1e-3
    assert config.gradinit.gamma == pytest.approx(100.0)


def test_gradinit_section_inherits_unset_fields():
    config = parse_config(document={
        'arch': {'kind': 'mlp', 'widths': [784, 10]},
        'init': 'gradinit',
        'train': {'optimizer': 'sgd', 'lr': 0.4},
        'gradinit': {'tau': 0.05},
    })
    assert config.gradinit.lr == 0.4
    assert config.gradinit.gamma == pytest.approx(0.5)
    assert config.gradinit.tau == 0.05


def test_overrides():
    document = apply_overrides({'dataset': 'mnist', 'train': {'lr': 0.1}},
                               ['train.lr=0.2', 'dataset.subset=100', 'seeds=[3, 4]', 'gradinit.gamma="inf"'])
    assert document == {'dataset': {'name': 'mnist', 'subset': 100}, 'train': {'lr': 0.2}, 'seeds': [3, 4],
                        'gradinit': {'gamma': 'inf'}}
    with pytest.raises(ConfigError):
        apply_overrides({}, ['train.lr'])


@pytest.mark.parametrize('document, field', [
    ({'arch': {'kind': 'mlp', 'depthh': 3}}, 'arch.depthh'),
    ({'optimizer': 'sgd'}, 'optimizer'),
    ({'init': 'lsuv'}, 'init'),
    ({'init': 'gradinit-penalty'}, 'gradinit.penalty_lambda'),
    ({'arch': {'kind': 'postln-transformer', 'use_layernorm': True}}, 'dataset.name'),
    ({'arch': {'kind': 'mlp', 'widths': [100, 10]}}, 'arch.widths'),
    ({'arch': {'kind': 'plaincnn', 'widths': [8]}, 'dataset': 'cifar10', 'init': 'fixup'}, 'init'),
    ({'seeds': []}, 'seeds'),
    ({'gradinit': {'tau': -1}}, 'gradinit.tau'),
])
def test_invalid_documents(document, field):
    with pytest.raises(ConfigError) as excinfo:
        parse_config(document=document)
    assert excinfo.value.field == field


def test_invalid_json_file(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{"arch": ')
    with pytest.raises(ConfigError):
        parse_config(str(path))


def test_run_id_depends_on_config_and_seed():
    a = parse_config(document={'arch': {'kind': 'mlp', 'widths': [784, 10]}})
    b = parse_config(document={'arch': {'kind': 'mlp', 'widths': [784, 32, 10]}})
    assert run_id('train', a, 0) == run_id('train', a, 0)
    assert run_id('train', a, 0) != run_id('train', b, 0)
    assert run_id('train', a, 0).endswith('_s0')
    assert run_id('train', a, 1) != run_id('train', a, 0)


def test_gradinit_command(mnist_dir, tmp_path):
    out = str(tmp_path / 'out')
    assert main(['gradinit', '--config', _write(tmp_path, _document(mnist_dir)), '--out', out, '--seed', '2']) == 0
    run_dir = _only_run_dir(out)
    assert run_dir.endswith('_s2')
    with open(os.path.join(run_dir, 'scales.json')) as f:
        document = json.load(f)
    assert document['config']['seeds'] == [2]
    assert len(document['content_hash']) == 64
    assert [s['block_name'] for s in document['scales']] == ['fc0.weight', 'fc0.bias', 'fc1.weight', 'fc1.bias']
    assert document['report']['iterations'] == 3
    with open(os.path.join(run_dir, 'scale_factors.csv')) as f:
        assert len(list(csv.reader(f))) == 5


def test_train_command_writes_checkpoint(mnist_dir, tmp_path):
    out = str(tmp_path / 'out')
    assert main(['train', '--config', _write(tmp_path, _document(mnist_dir)), '--out', out]) == 0
    run_dir = _only_run_dir(out)
    with open(os.path.join(run_dir, 'summary.json')) as f:
        summary = json.load(f)
    assert summary['init'] == 'gradinit'
    assert 0.0 <= summary['acc1'] <= 1.0
    state, header = load_checkpoint(os.path.join(run_dir, 'model.ckpt'),
                                    build_model(parse_config(document=_document(mnist_dir)).arch))
    assert header['meta']['init'] == 'gradinit'
    assert set(state) == {'fc0.weight', 'fc0.bias', 'fc1.weight', 'fc1.bias'}
    assert os.path.exists(os.path.join(run_dir, 'model.ckpt.meta.json'))


def test_diagnose_command(mnist_dir, tmp_path):
    out = str(tmp_path / 'out')
    assert main(['diagnose', '--config', _write(tmp_path, _document(mnist_dir)), '--out', out]) == 0
    run_dir = _only_run_dir(out)
    for name in ('profile_before.csv', 'profile_after.csv', 'scale_factors.csv', 'bn_probe.json'):
        assert os.path.exists(os.path.join(run_dir, name))
    with open(os.path.join(run_dir, 'bn_probe.json')) as f:
        probes = json.load(f)['probes']
    assert [p['alpha'] for p in probes] == [0.5, 2.0]
    assert probes[0]['var_ratio'] > probes[1]['var_ratio']


def test_diagnose_json_format(mnist_dir, tmp_path):
    out = str(tmp_path / 'out')
    args = ['diagnose', '--config', _write(tmp_path, _document(mnist_dir)), '--out', out,
            '--set', 'diagnostics.format="json"']
    assert main(args) == 0
    assert os.path.exists(os.path.join(_only_run_dir(out), 'profile_after.json'))


def test_gradcheck_command(tmp_path):
    config = parse_config(document={'diagnostics': {'gradcheck_trials': 1}})
    code, run_dir = run_command('gradcheck', config, out=str(tmp_path))
    assert code == 0
    with open(os.path.join(run_dir, 'gradcheck.json')) as f:
        report = json.load(f)
    assert report['passed']


def test_exit_codes(tmp_path, mnist_dir):
    bad = _write(tmp_path, {'arch': {'kind': 'mlp', 'depthh': 3}})
    assert main(['train', '--config', bad]) == 2
    missing = _write(tmp_path, _document(str(tmp_path / 'no-data')))
    assert main(['gradinit', '--config', missing]) == 3
    assert main(['gradinit', '--config', str(tmp_path / 'absent.json')]) == 5
    with pytest.raises(SystemExit):
        main(['deploy'])


def test_data_dir_flag(mnist_dir, tmp_path):
    document = _document('unused')
    out = str(tmp_path / 'out')
    assert main(['gradinit', '--config', _write(tmp_path, document), '--data-dir', mnist_dir, '--out', out]) == 0


def test_run_log_is_written_into_run_dir(tmp_path):
    config = parse_config(document={'diagnostics': {'gradcheck_trials': 1}})
    _, run_dir = run_command('gradcheck', config, out=str(tmp_path))
    with open(os.path.join(run_dir, 'run.log')) as f:
        text = f.read()
    assert 'Running gradcheck (seed 0)' in text
    assert 'Gradcheck:' in text


def _transformer_document(**gradinit):
    return {
        'arch': {'kind': 'postln-transformer', 'use_layernorm': True, 'model_dim': 8, 'heads': 2, 'ffn_dim': 8,
                 'vocab_size': 8, 'encoder_layers': 1, 'decoder_layers': 1, 'max_len': 8},
        'dataset': {'name': 'synth-seq', 'seq_vocab': 8, 'seq_length': 3, 'train_count': 64, 'test_count': 16},
        'init': 'gradinit',
        'gradinit': {'algo': 'adam', 'lr': 0.0005, 'iterations': 2, 'batch_size': 16, **gradinit},
        'train': {'optimizer': 'adam', 'lr': 0.0005, 'schedule': 'linear-decay', 'epochs': 1, 'batch_size': 32},
        'experiment': {'inits': ['xavier', 'gradinit'], 'lr_grid': [0.0005, 0.004], 'failure_seeds': [0]},
    }


def test_peak_lr_moves_gradinit_with_training():
    config = parse_config(document=_transformer_document())
    assert config.gradinit.gamma == pytest.approx(200.0)
    use_peak_lr(config, 0.004)
    assert config.train.lr == 0.004
    assert config.gradinit.lr == 0.004
    assert config.gradinit.gamma == pytest.approx(25.0)


def test_peak_lr_keeps_explicit_gamma():
    config = use_peak_lr(parse_config(document=_transformer_document(gamma=1000.0)), 0.004)
    assert config.gradinit.lr == 0.004
    assert config.gradinit.gamma == 1000.0


def test_experiment_trains_and_initializes_at_the_searched_lr(tmp_path, monkeypatch):
    seen = {}
    monkeypatch.setattr(cli, 'find_failing_lr', lambda config: {'grid': [0.0005, 0.004], 'outcomes': [],
                                                                 'chosen_lr': 0.004})
    monkeypatch.setattr(cli, 'run_experiment', lambda config, run_dir: seen.setdefault('config', config))
    code, run_dir = run_command('experiment', parse_config(document=_transformer_document()), out=str(tmp_path))
    assert code == 0
    config = seen['config']
    assert (config.train.lr, config.gradinit.lr) == (0.004, 0.004)
    assert config.gradinit.gamma == pytest.approx(25.0)
    assert os.path.exists(os.path.join(run_dir, 'lr_search.json'))


def test_shipped_transformer_setup():
    config = parse_config(os.path.join(CONFIG_DIR, 'transformer_copy.json'))
    assert (config.arch.model_dim, config.arch.heads, config.arch.ffn_dim) == (64, 4, 128)
    steps = config.train.epochs * math.ceil(config.dataset.train_count / config.train.batch_size)
    assert steps <= 2000
