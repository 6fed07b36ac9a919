"""Training optimizers, learning-rate schedules and gradient clipping.

Parameters and gradients are plain ``name -> ndarray`` mappings; updates are
applied in place.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from src.errors import ConfigError, ShapeError

SCHEDULES = ('constant', 'cosine', 'linear-warmup-then-constant', 'linear-decay', 'warmup-then-linear-decay')


@dataclass
class OptimizerState:
    kind: str = 'sgd'
    lr: float = 0.1
    momentum: float = 0.0
    nesterov: bool = False
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    momentum_buffers: dict = field(default_factory=dict)
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def _check(params, grads):
    for name, g in grads.items():
        if params[name].shape != np.shape(g):
            raise ShapeError(f"{name}: gradient shape {np.shape(g)} does not match parameter {params[name].shape}")


def sgd_step(state, params, grads, lr=None):
    """v <- mu*v + g ; theta <- theta - lr*v (weight decay folded into g)"""
    _check(params, grads)
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        theta = params[name]
        if state.weight_decay:
            g = g + state.weight_decay * theta
        if state.momentum:
            buf = state.momentum_buffers.get(name)
            buf = np.array(g, copy=True) if buf is None else state.momentum * buf + g
            state.momentum_buffers[name] = buf
            g = g + state.momentum * buf if state.nesterov else buf
        theta -= lr * g
    state.step += 1


def adam_step(state, params, grads, lr=None):
    """Bias-corrected Adam; kind 'adamw' decouples weight decay from the moments"""
    _check(params, grads)
    lr = state.lr if lr is None else lr
    beta1, beta2 = state.betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    decoupled = state.kind == 'adamw'
    for name, g in grads.items():
        theta = params[name]
        if state.weight_decay and not decoupled:
            g = g + state.weight_decay * theta
        m = state.exp_avg.get(name, np.zeros_like(theta))
        v = state.exp_avg_sq.get(name, np.zeros_like(theta))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.exp_avg[name], state.exp_avg_sq[name] = m, v
        if state.weight_decay and decoupled:
            theta -= lr * state.weight_decay * theta
        theta -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


def optimizer_step(state, params, grads, lr=None):
    if state.kind == 'sgd':
        return sgd_step(state, params, grads, lr)
    if state.kind in ('adam', 'adamw'):
        return adam_step(state, params, grads, lr)
    raise ConfigError('train.optimizer', f"unknown optimizer {state.kind!r}")


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))


def clip_global_norm(grads, max_norm):
    """Scale all gradients by max_norm/||g||_2 when the global norm exceeds max_norm.

    Returns (clipped grads, norm before clipping).
    """
    if max_norm <= 0:
        raise ConfigError('train.clip_norm', "max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm


@dataclass
class Schedule:
    kind: str = 'cosine'
    base_lr: float = 0.1
    total_steps: int = 1
    warmup_steps: int = 0

    def validate(self):
        if self.kind not in SCHEDULES:
            raise ConfigError('train.schedule', f"must be one of {', '.join(SCHEDULES)}, got {self.kind!r}")
        if self.base_lr < 0:
            raise ConfigError('train.lr', "must be non-negative")
        if self.total_steps < 1:
            raise ConfigError('train.schedule', "total_steps must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError('train.warmup_steps', "must lie in [0, total_steps]")
        return self

    def lr_at(self, t):
        return lr_at(self, t)


def lr_at(schedule, t):
    """Learning rate at iteration t in [0, total_steps]"""
    total, warmup, base = schedule.total_steps, schedule.warmup_steps, schedule.base_lr
    if not 0 <= t <= total:
        raise ConfigError('train.schedule', f"step {t} outside [0, {total}]")
    kind = schedule.kind
    if kind == 'constant':
        return base
    if kind == 'cosine':
        return 0.5 * base * (1.0 + math.cos(math.pi * t / total))
    if kind == 'linear-decay':
        return base * (1.0 - t / total)
    if warmup and t < warmup:
        return base * t / warmup
    if kind == 'linear-warmup-then-constant':
        return base
    if kind == 'warmup-then-linear-decay':
        return base * (total - t) / (total - warmup) if total > warmup else 0.0
    raise ConfigError('train.schedule', f"unknown schedule {kind!r}")
