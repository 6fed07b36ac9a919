"""Training loop, initialization dispatch and seed-swept experiments."""
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, asdict, replace
from datetime import datetime
import csv
import math
import os
import time

import numpy as np
from tqdm import tqdm

from config.settings import settings
from src import __version__
from src.architectures import build_model
from src.autodiff import Tape
from src.data import augment_batch, iterate_batches, load_dataset
from src.errors import ArtifactError, ConfigError, GradInitError
from src.gradinit import apply_scales, gradinit_run, penalty_run
from src.initializers import init_model
from src.logger import logger
from src.nn import accuracy
from src.optim import OptimizerState, Schedule, SCHEDULES, clip_global_norm, optimizer_step
from src.utils import ensure_dir, mean_stderr, write_artifact, write_sidecar

INIT_METHODS = ('kaiming', 'xavier', 'fixup', 'gradinit', 'gradinit-penalty', 'warmup-epoch', 'constlr-epoch')
OPTIMIZERS = ('sgd', 'adam', 'adamw')
TABLE_COLUMNS = ('init', 'n_seeds', 'acc1_mean', 'acc1_stderr', 'best_mean', 'best_stderr')
EVAL_BATCH = 512


@dataclass
class TrainConfig:
    optimizer: str = 'sgd'
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = False
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = 'cosine'
    warmup_steps: int = 0
    epochs: int = 1
    batch_size: int = 128
    clip_norm: float = None

    def validate(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError('train.optimizer', f"must be one of {', '.join(OPTIMIZERS)}, got {self.optimizer!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigError('train.schedule', f"must be one of {', '.join(SCHEDULES)}, got {self.schedule!r}")
        if not self.lr > 0:
            raise ConfigError('train.lr', f"must be positive, got {self.lr}")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError('train.epochs', f"must be a positive integer, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError('train.batch_size', f"must be a positive integer, got {self.batch_size!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError('train.momentum', f"must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError('train.weight_decay', "must be non-negative")
        if self.warmup_steps < 0:
            raise ConfigError('train.warmup_steps', "must be non-negative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError('train.clip_norm', "must be positive or null")
        return self

    def optimizer_state(self):
        return OptimizerState(self.optimizer, self.lr, self.momentum, self.nesterov, tuple(self.betas),
                              self.eps, self.weight_decay)

    def to_dict(self):
        return asdict(self)


@dataclass
class ExperimentConfig:
    inits: list = field(default_factory=lambda: ['kaiming', 'gradinit'])
    lr_grid: list = field(default_factory=list)
    failure_seeds: list = field(default_factory=lambda: [0, 1, 2, 3])

    def validate(self):
        if not self.inits:
            raise ConfigError('experiment.inits', "needs at least one init method")
        for method in self.inits:
            if method not in INIT_METHODS:
                raise ConfigError('experiment.inits', f"unknown init method {method!r}")
        if any(not lr > 0 for lr in self.lr_grid):
            raise ConfigError('experiment.lr_grid', "learning rates must be positive")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    epochs: list = field(default_factory=list)
    diverged: bool = False
    final_loss: float = None

    @property
    def acc1(self):
        return self.epochs[0].test_accuracy if self.epochs else None

    @property
    def acc_best(self):
        return max(r.test_accuracy for r in self.epochs) if self.epochs else None

    def to_dict(self):
        return {'epochs': [asdict(r) for r in self.epochs], 'acc1': self.acc1, 'acc_best': self.acc_best,
                'diverged': self.diverged, 'final_loss': self.final_loss}


def evaluate(model, dataset):
    """Eval-mode accuracy over the whole split"""
    rng = np.random.default_rng(0)
    correct, total = 0.0, 0
    for batch in iterate_batches(dataset, EVAL_BATCH, rng, shuffle=False):
        size = np.asarray(batch.targets).size
        correct += accuracy(model, batch) * size
        total += size
    return correct / total if total else 0.0


def _train_step(model, batch, state, lr, clip_norm):
    tape = Tape()
    params = model.variables(tape)
    loss = model.forward_loss(batch, 'train', params, update_stats=True)
    value = loss.item()
    if not math.isfinite(value):
        return value
    grads = {name: g.data for name, g in tape.backward(loss, params).items()}
    if clip_norm:
        grads, _ = clip_global_norm(grads, clip_norm)
    optimizer_step(state, {b.name: b.data for b in model.blocks}, grads, lr)
    return value


def train_epochs(model, train, test, config, rng, augment=False, schedule=None, record=True, desc="Training"):
    """Run config.epochs epochs (or one epoch under an explicit schedule) and collect per-epoch records"""
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    epochs = 1 if schedule is not None else config.epochs
    if schedule is None:
        schedule = Schedule(config.schedule, config.lr, epochs * steps_per_epoch, config.warmup_steps).validate()
    state = config.optimizer_state()
    result = TrainResult()
    step = 0
    for epoch in tqdm(range(epochs), desc=desc, disable=not settings.SHOW_PROGRESS):
        started = time.perf_counter()
        losses, lr = [], schedule.base_lr
        if not result.diverged:
            for batch in iterate_batches(train, config.batch_size, rng):
                if augment:
                    batch = augment_batch(batch, rng)
                lr = schedule.lr_at(min(step, schedule.total_steps))
                value = _train_step(model, batch, state, lr, config.clip_norm)
                step += 1
                losses.append(value)
                if not math.isfinite(value):
                    result.diverged = True
                    logger.warning(f"Non-finite training loss at epoch {epoch + 1}, step {step}; stopping updates")
                    break
        train_loss = float(np.mean(losses)) if losses and not result.diverged else float('nan')
        if record:
            acc = evaluate(model, test) if not result.diverged else 0.0
            result.epochs.append(EpochRecord(epoch + 1, train_loss, acc, lr, time.perf_counter() - started))
            logger.info(f"Epoch {epoch + 1}/{epochs}: train loss {train_loss:.4f}, test accuracy {acc:.4f}")
        if losses:
            result.final_loss = losses[-1]
    return result


def train_model(model, train, test, config, seed=0, augment=False):
    """Train with the configured optimizer and per-iteration schedule; Acc_1 and Acc_best come from the records"""
    config.validate()
    return train_epochs(model, train, test, config, np.random.default_rng(seed), augment)


def pretrain_epoch(model, train, config, seed, warmup=True):
    """One extra epoch before regular training: linear warmup to config.lr, or constant config.lr"""
    steps = math.ceil(len(train) / config.batch_size)
    kind = 'linear-warmup-then-constant' if warmup else 'constant'
    schedule = Schedule(kind, config.lr, steps, steps if warmup else 0).validate()
    train_epochs(model, train, None, config, np.random.default_rng(seed + 7919), schedule=schedule,
                 record=False, desc="Pre-training epoch")


def initialize(model, method, train, run_config, seed):
    """Apply an init method on top of the default draw; returns the GradInit report when one ran"""
    if method in ('kaiming', 'xavier', 'fixup'):
        init_model(model, method, seed)
        return None
    if method in ('warmup-epoch', 'constlr-epoch'):
        pretrain_epoch(model, train, run_config.train, seed, warmup=method == 'warmup-epoch')
        return None
    if method not in ('gradinit', 'gradinit-penalty'):
        raise ConfigError('init', f"unknown init method {method!r}")
    gconfig = replace(run_config.gradinit, seed=seed)
    if method == 'gradinit-penalty':
        if gconfig.penalty_lambda is None:
            raise ConfigError('gradinit.penalty_lambda', "required for gradinit-penalty")
        scales, report = penalty_run(model, train, gconfig, gconfig.penalty_lambda)
    else:
        scales, report = gradinit_run(model, train, gconfig)
    apply_scales(model, scales)
    return report


def run_single(run_config, seed, method=None):
    """Build, initialize and train one model; returns the run summary"""
    method = method or run_config.init
    started = time.perf_counter()
    train = load_dataset(run_config.dataset, 'train')
    test = load_dataset(run_config.dataset, 'test')
    model = build_model(run_config.arch, seed)
    report = initialize(model, method, train, run_config, seed)
    result = train_model(model, train, test, run_config.train, seed, run_config.dataset.augment)
    return {
        'init': method,
        'seed': seed,
        'version': __version__,
        'wall_time': time.perf_counter() - started,
        'gradinit': report.to_dict() if report is not None else None,
        **result.to_dict(),
    }, model


def _seed_worker(run_config, method, seed):
    summary, _ = run_single(run_config, seed, method)
    return summary


def _log_failure(error_file, method, seed, error):
    is_new = not os.path.exists(error_file)
    try:
        with open(error_file, 'a', newline='') as f:
            writer = csv.writer(f)
            if is_new:
                writer.writerow(['init', 'seed', 'error', 'timestamp'])
            writer.writerow([method, seed, error, datetime.now().isoformat()])
    except OSError as e:
        raise ArtifactError(f"Cannot append to {error_file}: {e}") from e


def summarize(summaries, inits):
    """Mean and standard error of Acc_1 and Acc_best per init method"""
    table = []
    for method in inits:
        runs = [s for s in summaries if s['init'] == method]
        acc1_mean, acc1_se = mean_stderr([s['acc1'] for s in runs])
        best_mean, best_se = mean_stderr([s['acc_best'] for s in runs])
        table.append({'init': method, 'n_seeds': len(runs), 'acc1_mean': acc1_mean, 'acc1_stderr': acc1_se,
                      'best_mean': best_mean, 'best_stderr': best_se})
    return table


def format_table(table):
    lines = [f"{'init':<18}{'seeds':>6}{'Acc1':>18}{'Acc_best':>18}"]
    for row in table:
        lines.append(f"{row['init']:<18}{row['n_seeds']:>6}"
                     f"{100 * row['acc1_mean']:>10.2f} ± {100 * row['acc1_stderr']:<5.2f}"
                     f"{100 * row['best_mean']:>10.2f} ± {100 * row['best_stderr']:<5.2f}")
    return "\n".join(lines)


def run_experiment(run_config, run_dir, max_workers=None):
    """Sweep init methods x seeds in worker processes; failed seeds are logged and skipped"""
    inits, seeds = run_config.experiment.inits, run_config.seeds
    error_file = os.path.join(run_dir, 'errors', 'experiment_errors.csv')
    ensure_dir(os.path.dirname(error_file))
    jobs = [(method, seed) for method in inits for seed in seeds]
    logger.info(f"Starting experiment: {len(inits)} init methods x {len(seeds)} seeds")

    summaries, failures = [], 0
    with ProcessPoolExecutor(max_workers=max_workers or settings.MAX_WORKERS) as pool:
        futures = {pool.submit(_seed_worker, run_config, method, seed): (method, seed) for method, seed in jobs}
        for future in tqdm(as_completed(futures), total=len(futures), desc="Seeds",
                           disable=not settings.SHOW_PROGRESS):
            method, seed = futures[future]
            try:
                summaries.append(future.result())
            except Exception as e:
                failures += 1
                logger.warning(f"Run {method} seed {seed} failed: {e}")
                _log_failure(error_file, method, seed, str(e))

    summaries.sort(key=lambda s: (inits.index(s['init']), s['seed']))
    table = summarize(summaries, inits)
    config = run_config.to_dict()
    write_artifact(os.path.join(run_dir, 'experiment.json'), {'table': table, 'runs': summaries, 'failures': failures},
                   config)
    write_table(table, os.path.join(run_dir, 'experiment_table.csv'), config)
    logger.info("Experiment results (mean ± stderr over seeds, %):\n" + format_table(table))
    logger.info(f"Experiment complete: {len(summaries)}/{len(jobs)} runs succeeded")
    return table


def write_table(table, path, config=None):
    try:
        ensure_dir(os.path.dirname(path) or '.')
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(TABLE_COLUMNS)
            for row in table:
                writer.writerow([row[c] if c in ('init', 'n_seeds') else f"{row[c]:.9g}" for c in TABLE_COLUMNS])
    except OSError as e:
        raise ArtifactError(f"Cannot write {path}: {e}") from e
    write_sidecar(path, config)
    return path


def _failed(result, vocab):
    if result.diverged or result.final_loss is None:
        return True
    return not math.isfinite(result.final_loss) or result.final_loss > math.log(vocab) / 2


def find_failing_lr(run_config, lrs=None, seeds=None):
    """Smallest lr in an ascending grid at which plain Xavier fails in at least half the seeds"""
    lrs = sorted(lrs or run_config.experiment.lr_grid)
    seeds = list(seeds or run_config.experiment.failure_seeds)
    if not lrs:
        raise ConfigError('experiment.lr_grid', "needs at least one learning rate")
    vocab = run_config.arch.vocab_size
    train = load_dataset(run_config.dataset, 'train')
    test = load_dataset(run_config.dataset, 'test')
    outcomes, chosen = [], None
    for lr in lrs:
        config = TrainConfig(**{**run_config.train.to_dict(), 'lr': lr})
        failed = []
        for seed in seeds:
            model = build_model(run_config.arch, seed)
            init_model(model, 'xavier', seed)
            try:
                failed.append(_failed(train_model(model, train, test, config, seed), vocab))
            except GradInitError as e:
                logger.warning(f"lr {lr} seed {seed} raised {e}; counted as a failure")
                failed.append(True)
        outcomes.append({'lr': lr, 'failed_seeds': [s for s, f in zip(seeds, failed) if f]})
        logger.info(f"Xavier at lr={lr}: {sum(failed)}/{len(seeds)} seeds failed")
        if 2 * sum(failed) >= len(seeds):
            chosen = lr
            break
    if chosen is None:
        logger.warning(f"Xavier did not fail at any lr in {lrs}")
    return {'grid': lrs, 'outcomes': outcomes, 'chosen_lr': chosen}
