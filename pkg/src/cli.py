"""Command-line front end.

    python -m src.cli gradinit|train|diagnose|gradcheck|experiment --config config/mnist_mlp.json
"""
from dataclasses import dataclass, field, fields, replace, asdict
import argparse
import json
import os
import sys

import numpy as np

from config.settings import settings
from src.architectures import ArchSpec, build_model
from src.checkpoint import save_checkpoint
from src.data import DatasetSpec, load_dataset
from src.diagnostics import (
    DEFAULT_BATCHES, bn_magnification_probe, emit_profiles, emit_scales, grad_variance_profile,
)
from src.errors import ConfigError, GradInitError
from src.gradcheck import run_gradcheck
from src.gradinit import GradInitConfig, apply_scales, gradinit_run, penalty_run
from src.harness import INIT_METHODS, ExperimentConfig, TrainConfig, find_failing_lr, run_experiment, run_single
from src.logger import logger, run_log
from src.utils import content_hash, ensure_dir, load_json, write_artifact, write_sidecar

COMMANDS = ('gradinit', 'train', 'diagnose', 'gradcheck', 'experiment')
GRADINIT_METHODS = ('gradinit', 'gradinit-penalty')
INPUT_FEATURES = {'mnist': (1, 784), 'cifar10': (3, 3072)}


@dataclass
class DiagnosticsConfig:
    batches: int = DEFAULT_BATCHES
    batch_size: int = 128
    format: str = 'csv'
    probe_n: int = 64
    probe_d: int = 16
    probe_trials: int = 1000
    probe_alphas: list = field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0, 4.0])
    gradcheck_trials: int = 100

    def validate(self):
        if self.batches < 2:
            raise ConfigError('diagnostics.batches', "must be >= 2")
        if self.format not in ('csv', 'json'):
            raise ConfigError('diagnostics.format', "must be 'csv' or 'json'")
        if self.gradcheck_trials < 1:
            raise ConfigError('diagnostics.gradcheck_trials', "must be >= 1")
        return self

    def to_dict(self):
        return asdict(self)


SECTIONS = {
    'arch': ArchSpec,
    'dataset': DatasetSpec,
    'gradinit': GradInitConfig,
    'train': TrainConfig,
    'experiment': ExperimentConfig,
    'diagnostics': DiagnosticsConfig,
}
SCALARS = ('init', 'seeds', 'out')


@dataclass
class RunConfig:
    arch: ArchSpec = field(default_factory=ArchSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    init: str = 'kaiming'
    gradinit: GradInitConfig = None
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    seeds: list = field(default_factory=lambda: [0])
    out: str = None

    def validate(self):
        for name in SECTIONS:
            section = getattr(self, name)
            if section is not None:
                section.validate()
        if self.init not in INIT_METHODS:
            raise ConfigError('init', f"must be one of {', '.join(INIT_METHODS)}, got {self.init!r}")
        if self.init in GRADINIT_METHODS and self.gradinit is None:
            self.gradinit = self.default_gradinit().validate()
        if self.init == 'gradinit-penalty' and self.gradinit.penalty_lambda is None:
            raise ConfigError('gradinit.penalty_lambda', "required for init gradinit-penalty")
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError('seeds', "must be a non-empty list of non-negative integers")
        self._check_compatible()
        return self

    def default_gradinit(self, **values):
        """GradInit defaults follow the training optimizer and learning rate"""
        values.setdefault('algo', 'sgd' if self.train.optimizer == 'sgd' else 'adam')
        values.setdefault('lr', self.train.lr)
        return GradInitConfig(**values)

    def needs_gradinit(self, inits=None):
        return any(m in GRADINIT_METHODS for m in (inits or [self.init]))

    def _check_compatible(self):
        arch, data = self.arch, self.dataset
        if arch.kind == 'postln-transformer':
            if data.name != 'synth-seq':
                raise ConfigError('dataset.name', "the transformer trains on synth-seq")
            if arch.vocab_size != data.seq_vocab:
                raise ConfigError('arch.vocab_size', f"must equal dataset.seq_vocab ({data.seq_vocab})")
            if arch.max_len < data.seq_length + 1:
                raise ConfigError('arch.max_len', f"must cover seq_length + 1 = {data.seq_length + 1}")
            return
        if data.name == 'synth-seq':
            raise ConfigError('dataset.name', f"{arch.kind} does not take token sequences")
        channels, features = INPUT_FEATURES[data.name]
        if arch.kind == 'mlp':
            if arch.widths[0] != features:
                raise ConfigError('arch.widths', f"first width must be {features} for {data.name}")
            if arch.widths[-1] != 10:
                raise ConfigError('arch.widths', "last width must be the 10 classes")
        elif arch.in_channels != channels:
            raise ConfigError('arch.in_channels', f"must be {channels} for {data.name}")
        if arch.kind != 'mlp' and arch.num_classes != 10:
            raise ConfigError('arch.num_classes', "must be 10")
        if self.init == 'fixup' and (arch.kind != 'resnet' or arch.use_batchnorm):
            raise ConfigError('init', "fixup needs a resnet without batchnorm")

    def to_dict(self):
        return {
            **{name: getattr(self, name).to_dict() if getattr(self, name) is not None else None for name in SECTIONS},
            'init': self.init, 'seeds': list(self.seeds), 'out': self.out,
        }


def _parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(document, overrides):
    """Apply ``section.key=value`` (or ``key=value`` for init/seeds/out) strings to a config document"""
    for item in overrides or ():
        if '=' not in item:
            raise ConfigError(item, "override must look like section.key=value")
        path, raw = item.split('=', 1)
        value = _parse_value(raw)
        if '.' in path:
            section, key = path.split('.', 1)
            target = document.get(section)
            if isinstance(target, str):
                target = {'name' if section == 'dataset' else 'kind': target}
            document[section] = {**(target or {}), key: value}
        else:
            document[path] = value
    return document


def _section(name, values, build=None):
    cls = SECTIONS[name]
    if isinstance(values, str):
        values = {'name' if name == 'dataset' else 'kind': values}
    if not isinstance(values, dict):
        raise ConfigError(name, "must be an object")
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
    return (build or cls)(**values)


def parse_config(path=None, overrides=None, document=None):
    """Load, override and validate a run configuration"""
    if document is None:
        document = {}
        if path:
            try:
                document = load_json(path)
            except json.JSONDecodeError as e:
                raise ConfigError('config', f"{path} is not valid JSON: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError('config', "must be a JSON object")
    document = apply_overrides(json.loads(json.dumps(document)), overrides)

    for key in document:
        if key not in SECTIONS and key not in SCALARS:
            raise ConfigError(key, "unknown section")
    config = RunConfig(**{k: document[k] for k in SCALARS if k in document})
    for name in ('arch', 'dataset', 'train', 'experiment', 'diagnostics'):
        if name in document:
            setattr(config, name, _section(name, document[name]))
    if document.get('gradinit') is not None:
        config.gradinit = _section('gradinit', document['gradinit'], config.default_gradinit)
    return config.validate()


def run_id(command, config, seed):
    return f"{command}_{content_hash(config.to_dict())[:8]}_s{seed}"


def _gradinit_config(config, seed):
    gconfig = config.gradinit if config.gradinit is not None else config.default_gradinit().validate()
    return replace(gconfig, seed=seed)


def cmd_gradinit(config, seed, run_dir):
    train = load_dataset(config.dataset, 'train')
    model = build_model(config.arch, seed)
    gconfig = _gradinit_config(config, seed)
    if config.init == 'gradinit-penalty':
        scales, report = penalty_run(model, train, gconfig, gconfig.penalty_lambda)
    else:
        scales, report = gradinit_run(model, train, gconfig)
    echo = config.to_dict()
    write_artifact(os.path.join(run_dir, 'scales.json'), {'scales': scales.to_list(), 'report': report.to_dict()}, echo)
    emit_scales(scales, os.path.join(run_dir, 'scale_factors.csv'), echo)
    return 0


def cmd_train(config, seed, run_dir):
    summary, model = run_single(config, seed)
    echo = config.to_dict()
    write_artifact(os.path.join(run_dir, 'summary.json'), summary, echo)
    checkpoint = os.path.join(run_dir, 'model.ckpt')
    save_checkpoint(checkpoint, model, {'seed': seed, 'init': config.init, 'config_hash': content_hash(echo)})
    write_sidecar(checkpoint, echo)
    logger.info(f"Acc_1 {summary['acc1']:.4f}, Acc_best {summary['acc_best']:.4f}")
    return 0


def cmd_diagnose(config, seed, run_dir):
    diag = config.diagnostics
    train = load_dataset(config.dataset, 'train')
    model = build_model(config.arch, seed)
    echo = config.to_dict()
    ext = diag.format

    before = grad_variance_profile(model, train, diag.batches, diag.batch_size, seed, label='before')
    emit_profiles(before, os.path.join(run_dir, f"profile_before.{ext}"), ext, echo)
    scales, report = gradinit_run(model, train, _gradinit_config(config, seed))
    apply_scales(model, scales)
    after = grad_variance_profile(model, train, diag.batches, diag.batch_size, seed, label='after')
    emit_profiles(after, os.path.join(run_dir, f"profile_after.{ext}"), ext, echo)
    emit_scales(scales, os.path.join(run_dir, 'scale_factors.csv'), echo)

    probes = [bn_magnification_probe(diag.probe_n, diag.probe_d, a, diag.probe_trials, seed=seed)
              for a in diag.probe_alphas]
    write_artifact(os.path.join(run_dir, 'bn_probe.json'), {'probes': probes, 'gradinit': report.to_dict()}, echo)
    reduced = int(np.sum(after.column('grad_std') < before.column('grad_std')))
    logger.info(f"grad_std reduced on {reduced}/{len(after)} blocks after GradInit")
    return 0


def cmd_gradcheck(config, seed, run_dir):
    report = run_gradcheck(config.diagnostics.gradcheck_trials, seed)
    write_artifact(os.path.join(run_dir, 'gradcheck.json'), report.to_dict(), config.to_dict())
    if not report.passed:
        logger.error(f"Gradcheck failed for: {', '.join(report.failures)}")
        return 4
    return 0


def cmd_experiment(config, seed, run_dir):
    if config.needs_gradinit(config.experiment.inits) and config.gradinit is None:
        config.gradinit = config.default_gradinit().validate()
    if config.experiment.lr_grid:
        search = find_failing_lr(config)
        write_artifact(os.path.join(run_dir, 'lr_search.json'), search, config.to_dict())
        if search['chosen_lr'] is not None:
            use_peak_lr(config, search['chosen_lr'])
    run_experiment(config, run_dir)
    return 0


def use_peak_lr(config, lr):
    """Train at ``lr`` and let GradInit prepare for that same step size"""
    config.train = replace(config.train, lr=lr)
    if config.gradinit is not None:
        config.gradinit = config.gradinit.with_lr(lr)
    logger.info(f"Peak learning rate set to {lr} by the Xavier failure search"
                + (f"; GradInit gamma {config.gradinit.gamma:g}" if config.gradinit is not None else ""))
    return config


HANDLERS = {
    'gradinit': cmd_gradinit,
    'train': cmd_train,
    'diagnose': cmd_diagnose,
    'gradcheck': cmd_gradcheck,
    'experiment': cmd_experiment,
}


def run_command(command, config, seed=None, out=None):
    """Run one subcommand; returns (exit code, run directory)"""
    if command not in HANDLERS:
        raise ConfigError('command', f"must be one of {', '.join(COMMANDS)}, got {command!r}")
    seed = config.seeds[0] if seed is None else seed
    run_dir = os.path.join(out or config.out or settings.OUTPUT_DIR, run_id(command, config, seed))
    ensure_dir(run_dir)
    with run_log(run_dir):
        logger.info(f"Running {command} (seed {seed}) -> {run_dir}")
        return HANDLERS[command](config, seed, run_dir), run_dir


def main(argv=None):
    parser = argparse.ArgumentParser(prog='gradinit', description='Learn initialization scales and train small networks')
    parser.add_argument('command', choices=COMMANDS, help='What to run')
    parser.add_argument('--config', help='JSON run configuration')
    parser.add_argument('--seed', type=int, help='Run seed (experiment: the only seed)')
    parser.add_argument('--out', help='Artifact root (default OUTPUT_DIR)')
    parser.add_argument('--data-dir', help='Dataset directory (default DATA_DIR)')
    parser.add_argument('--set', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='Override a config value; may be repeated')
    args = parser.parse_args(argv)

    try:
        overrides = list(args.set)
        if args.data_dir:
            overrides.append(f"dataset.data_dir={json.dumps(args.data_dir)}")
        if args.seed is not None:
            overrides.append(f"seeds=[{args.seed}]")
        config = parse_config(args.config, overrides)
        code, run_dir = run_command(args.command, config, args.seed, args.out)
        logger.info(f"{args.command} finished with exit code {code}; artifacts in {run_dir}")
        return code
    except GradInitError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
