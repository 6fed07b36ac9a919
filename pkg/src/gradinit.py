"""GradInit: learn one scale factor per parameter block before training.

Every block W_i is viewed as alpha_i * W_i with W_i held constant. Each
iteration samples a minibatch S and measures the gradient norm at the
rescaled point. When the norm exceeds gamma the scales descend on the norm
itself (second order); otherwise they descend on the loss of a mixed batch
after one prescribed optimizer step, with the step image treated as a
constant. The learned scales are folded into the weights once by
apply_scales.
"""
from dataclasses import dataclass, field, asdict, replace
import math
import time

import numpy as np
from tqdm import tqdm

from config.settings import settings
from src import autodiff as ad
from src.autodiff import GradMap, Tape, Tensor, grad_norm
from src.data import sample_batch
from src.errors import (
    AutodiffError, ConfigError, DataError, DegenerateGradientError, GradInitError, NumericError, ShapeError,
)
from src.logger import logger
from src.nn import NORM_ROLES
from src.optim import OptimizerState, adam_step

ALGOS = ('sgd', 'adam')
SCALE_MODES = ('all', 'fix-norm-scales', 'only-norm-scales')
ALPHA_LOWER = 0.01


@dataclass
class ScaleVector:
    """One scale factor per parameter block, ordered as the model's blocks."""
    names: list
    alphas: np.ndarray
    trainable: np.ndarray = None
    consumed: bool = False
    clamp_hits: int = 0

    def __post_init__(self):
        self.alphas = np.array(self.alphas, dtype=np.float64).reshape(-1)
        if len(self.names) != len(self.alphas):
            raise ShapeError(f"{len(self.names)} block names for {len(self.alphas)} scales")
        if self.trainable is None:
            self.trainable = np.ones(len(self.alphas), dtype=bool)
        self.trainable = np.asarray(self.trainable, dtype=bool)

    def __len__(self):
        return len(self.alphas)

    @classmethod
    def ones(cls, model, scale_mode='all'):
        if scale_mode not in SCALE_MODES:
            raise ConfigError('gradinit.scale_mode', f"must be one of {', '.join(SCALE_MODES)}, got {scale_mode!r}")
        is_norm = np.array([b.role in NORM_ROLES for b in model.blocks], dtype=bool)
        if scale_mode == 'fix-norm-scales':
            trainable = ~is_norm
        elif scale_mode == 'only-norm-scales':
            trainable = is_norm
        else:
            trainable = np.ones(len(model.blocks), dtype=bool)
        if not trainable.any():
            raise ConfigError('gradinit.scale_mode', f"{scale_mode} leaves no trainable scale on this model")
        return cls(model.block_names(), np.ones(len(model.blocks)), trainable)

    def as_dict(self):
        return dict(zip(self.names, self.alphas.tolist()))

    def to_list(self):
        return [{'block_name': n, 'alpha': float(a)} for n, a in zip(self.names, self.alphas)]

    @classmethod
    def from_list(cls, entries):
        return cls([e['block_name'] for e in entries], [e['alpha'] for e in entries])


def recommend_gamma(algo, lr):
    """Norm bound limiting the first-order loss change of one step to 0.1"""
    if lr <= 0:
        raise ConfigError('gradinit.lr', f"must be positive, got {lr}")
    if algo == 'sgd':
        return math.sqrt(0.1 / lr)
    if algo == 'adam':
        return 0.1 / lr
    raise ConfigError('gradinit.algo', f"must be one of {', '.join(ALGOS)}, got {algo!r}")


def _parse_gamma(value):
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            raise ConfigError('gradinit.gamma', f"not a number: {value!r}")
    return value


@dataclass
class GradInitConfig:
    algo: str = 'sgd'
    lr: float = 0.1
    gamma: float = None
    tau: float = 1e-2
    iterations: int = 300
    overlap: float = 0.5
    alpha_lower: float = ALPHA_LOWER
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 128
    seed: int = 0
    scale_mode: str = 'all'
    penalty_lambda: float = None

    def validate(self):
        """Check ranges and fill gamma from the rule of thumb when unset"""
        if self.algo not in ALGOS:
            raise ConfigError('gradinit.algo', f"must be one of {', '.join(ALGOS)}, got {self.algo!r}")
        if not self.lr > 0:
            raise ConfigError('gradinit.lr', f"must be positive, got {self.lr}")
        self.gamma = recommend_gamma(self.algo, self.lr) if self.gamma is None else _parse_gamma(self.gamma)
        if not self.gamma > 0:
            raise ConfigError('gradinit.gamma', f"must be positive, got {self.gamma}")
        if self.tau < 0:
            raise ConfigError('gradinit.tau', f"must be non-negative, got {self.tau}")
        if not isinstance(self.iterations, int) or self.iterations < 1:
            raise ConfigError('gradinit.iterations', f"must be a positive integer, got {self.iterations!r}")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError('gradinit.overlap', f"must lie in [0, 1], got {self.overlap}")
        if not self.alpha_lower > 0:
            raise ConfigError('gradinit.alpha_lower', f"must be positive, got {self.alpha_lower}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError('gradinit.batch_size', f"must be a positive integer, got {self.batch_size!r}")
        if self.scale_mode not in SCALE_MODES:
            raise ConfigError('gradinit.scale_mode', f"must be one of {', '.join(SCALE_MODES)}, got {self.scale_mode!r}")
        if self.penalty_lambda is not None and self.penalty_lambda < 0:
            raise ConfigError('gradinit.penalty_lambda', f"must be non-negative, got {self.penalty_lambda}")
        if self.tau == 0:
            logger.warning("gradinit.tau is 0: scale factors will stay at 1")
        return self

    @property
    def norm_order(self):
        return 2 if self.algo == 'sgd' else 1

    @property
    def image_gamma(self):
        """Scale of the SGD step image; falls back to the rule of thumb when unconstrained"""
        gamma = self.gamma if self.gamma is not None else recommend_gamma(self.algo, self.lr)
        return gamma if math.isfinite(gamma) else recommend_gamma(self.algo, self.lr)

    def with_lr(self, lr):
        """Same setup for another step size; a gamma taken from the rule of thumb follows the new lr"""
        gamma = None if self.gamma is None else _parse_gamma(self.gamma)
        derived = gamma is None or (math.isfinite(gamma) and math.isclose(gamma, recommend_gamma(self.algo, self.lr)))
        return replace(self, lr=lr, gamma=None if derived else gamma).validate()

    def to_dict(self):
        return asdict(self)


@dataclass
class IterationRecord:
    iteration: int
    branch: str
    grad_norm: float
    objective_loss: float = None
    clamp_hits: int = 0
    predicted_change: float = None
    seconds: float = 0.0
    penalized: bool = False

    def to_dict(self):
        record = asdict(self)
        record['iter'] = record.pop('iteration')
        return record


@dataclass
class GradInitReport:
    names: list
    gamma: float
    norm_order: int
    records: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    second_order_evals: int = 0
    last_grad_norm: float = None
    penalty_lambda: float = None
    seconds: float = 0.0

    @property
    def constraint_iterations(self):
        return sum(1 for r in self.records if r.branch == 'constraint')

    def to_dict(self):
        return {
            'gamma': self.gamma,
            'norm_order': self.norm_order,
            'penalty_lambda': self.penalty_lambda,
            'iterations': len(self.records),
            'constraint_iterations': self.constraint_iterations,
            'second_order_evals': self.second_order_evals,
            'last_grad_norm': self.last_grad_norm,
            'seconds': self.seconds,
            'scales': [{'block_name': n, 'alpha': float(a)} for n, a in zip(self.names, self.alphas)],
            'records': [r.to_dict() for r in self.records],
        }


@dataclass
class ScaleGradient:
    """Gradient of a scalar criterion w.r.t. the scale vector, plus what was measured on the way"""
    grad: np.ndarray
    value: float
    grad_norm: float
    loss: float
    second_order: int = 0


# Step images

def _entries(g):
    return [v.data if isinstance(v, Tensor) else np.asarray(v) for v in g.values()]


def _flat(g):
    entries = _entries(g)
    return np.concatenate([e.ravel() for e in entries]) if entries else np.zeros(0)


def step_image(algo, g, gamma):
    """Detached first-step direction: sign(g) for Adam, gamma * g / ||g||_2 for SGD"""
    if not g:
        raise AutodiffError("step image of an empty gradient")
    if algo == 'adam':
        return GradMap((k, Tensor(np.sign(v))) for k, v in zip(g.keys(), _entries(g)))
    if algo != 'sgd':
        raise ConfigError('gradinit.algo', f"must be one of {', '.join(ALGOS)}, got {algo!r}")
    if not math.isfinite(gamma):
        raise ConfigError('gradinit.gamma', "the SGD step image needs a finite gamma")
    norm = float(np.linalg.norm(_flat(g)))
    if norm == 0.0:
        raise DegenerateGradientError("zero gradient: the SGD step image is undefined")
    return GradMap((k, Tensor(v * (gamma / norm))) for k, v in zip(g.keys(), _entries(g)))


def _graph_image(algo, g, gamma):
    """Step image kept on the tape"""
    if algo == 'adam':
        return GradMap((k, ad.sign(v)) for k, v in g.items())
    norm = grad_norm(g, 2)
    if norm.item() == 0.0:
        raise DegenerateGradientError("zero gradient: the SGD step image is undefined")
    return GradMap((k, ad.div(ad.scalar_mul(v, gamma), norm)) for k, v in g.items())


def predicted_loss_change(algo, g, lr, gamma):
    """First-order loss change of one step: -lr*gamma*||g||_2 (SGD), -lr*||g||_1 (Adam)"""
    flat = _flat(g)
    if algo == 'adam':
        return -lr * float(np.abs(flat).sum())
    return -lr * gamma * float(np.linalg.norm(flat))


# Gradients w.r.t. the scales

def rescaled_params(model, m, tape):
    """Tape view alpha_i * W_i; returns (alpha variables, rescaled params)"""
    if len(m) != len(model.blocks):
        raise ShapeError(f"{len(m)} scales for {len(model.blocks)} parameter blocks")
    alphas, theta = {}, {}
    for name, alpha, block in zip(m.names, m.alphas, model.blocks):
        if name != block.name:
            raise ShapeError(f"scale for {name!r} lines up with block {block.name!r}")
        alphas[name] = tape.variable(np.array(alpha))
        theta[name] = ad.mul(Tensor(block.data), alphas[name])
    return alphas, theta


def _as_vector(grads, names):
    return np.array([grads[n].item() for n in names])


def _forward(model, m, batch, tape):
    alphas, theta = rescaled_params(model, m, tape)
    return alphas, theta, model.forward_loss(batch, 'train', theta)


def _post_step_loss(model, theta, g, s_tilde, config, detach_step=True):
    if detach_step:
        image = step_image(config.algo, g, config.image_gamma)
    else:
        image = _graph_image(config.algo, g, config.image_gamma)
    stepped = {k: ad.sub(theta[k], ad.scalar_mul(image[k], config.lr)) for k in theta}
    return model.forward_loss(s_tilde, 'train', stepped)


def objective_grad(model, m, s, s_tilde, config, detach_step=True):
    """d/dm of L(S~; theta_m - lr * A[g]); the step image is a constant unless detach_step is False"""
    tape = Tape()
    alphas, theta, loss = _forward(model, m, s, tape)
    g = tape.backward(loss, theta, create_graph=not detach_step)
    norm = float(np.linalg.norm(_flat(g), ord=config.norm_order))
    post = _post_step_loss(model, theta, g, s_tilde, config, detach_step)
    grads = tape.backward(post, alphas)
    return ScaleGradient(_as_vector(grads, m.names), post.item(), norm, loss.item(), tape.generation)


def constraint_grad(model, m, s, config):
    """d/dm of ||g||_p via double backward"""
    tape = Tape()
    alphas, theta, loss = _forward(model, m, s, tape)
    g = tape.backward(loss, theta, create_graph=True)
    norm = grad_norm(g, config.norm_order)
    grads = tape.backward(norm, alphas)
    return ScaleGradient(_as_vector(grads, m.names), norm.item(), norm.item(), loss.item(), tape.generation)


def penalty_grad(model, m, s, s_tilde, config, penalty):
    """d/dm of L(S~; theta_m - lr * A[g]) + penalty * ||g||_p"""
    tape = Tape()
    alphas, theta, loss = _forward(model, m, s, tape)
    g = tape.backward(loss, theta, create_graph=True)
    norm = grad_norm(g, config.norm_order)
    post = _post_step_loss(model, theta, g, s_tilde, config)
    total = ad.add(post, ad.scalar_mul(norm, penalty))
    grads = tape.backward(total, alphas)
    return ScaleGradient(_as_vector(grads, m.names), post.item(), norm.item(), loss.item(), tape.generation)


# Scale bookkeeping

def clamp_scales(m, alpha_lower=ALPHA_LOWER):
    """alpha_i <- max(alpha_i, alpha_lower); the number of raised entries lands in m.clamp_hits"""
    below = m.alphas < alpha_lower
    m.clamp_hits = int(below.sum())
    m.alphas[below] = alpha_lower
    return m


def apply_scales(model, m):
    """Fold the scales into the weights in place; a scale vector can be applied once"""
    if m.consumed:
        raise GradInitError("scale vector has already been applied")
    if len(m) != len(model.blocks):
        raise ShapeError(f"{len(m)} scales for {len(model.blocks)} parameter blocks")
    for name, alpha, block in zip(m.names, m.alphas, model.blocks):
        if name != block.name:
            raise ShapeError(f"scale for {name!r} lines up with block {block.name!r}")
        block.data[...] *= alpha
    m.consumed = True
    logger.info(f"Applied {len(m)} scale factors (min {m.alphas.min():.4g}, max {m.alphas.max():.4g})")


def mix_batches(s, pool, r, rng):
    """Evaluation batch sharing round(r*|S|) examples with S; the rest come from pool outside S"""
    if not 0.0 <= r <= 1.0:
        raise ConfigError('gradinit.overlap', f"must lie in [0, 1], got {r}")
    size = len(s)
    if size < 1:
        raise DataError("cannot mix an empty batch")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    shared = int(math.floor(r * size + 0.5))
    kept = rng.permutation(np.asarray(s.indices))[:shared]
    candidates = np.setdiff1d(np.arange(len(pool)), s.indices)
    fresh_count = size - shared
    if fresh_count > len(candidates):
        raise DataError(f"pool has {len(candidates)} examples outside S, {fresh_count} needed")
    fresh = rng.choice(candidates, fresh_count, replace=False) if fresh_count else np.zeros(0, dtype=np.int64)
    return pool.batch(np.concatenate([kept, fresh]).astype(np.int64))


# Solvers

def _solve(model, dataset, config, penalty=None):
    config.validate()
    if len(dataset) == 0:
        raise DataError("GradInit needs a non-empty dataset")
    m = ScaleVector.ones(model, config.scale_mode)
    rng = np.random.default_rng(config.seed)
    meta = OptimizerState('adam', lr=config.tau, betas=tuple(config.betas), eps=config.eps)
    weights = model.checksum()
    p = config.norm_order
    gamma = math.inf if penalty is not None else config.gamma
    report = GradInitReport(m.names, gamma, p, penalty_lambda=penalty)

    mode = f"penalty lambda={penalty}" if penalty is not None else f"gamma={config.gamma:.4g}"
    logger.info(f"Starting GradInit ({config.algo}, lr={config.lr}, {mode}, tau={config.tau}, "
                f"T={config.iterations}, {len(m)} blocks)")
    started = time.perf_counter()
    bar = tqdm(range(config.iterations), desc="GradInit", disable=not settings.SHOW_PROGRESS)
    for t in bar:
        tick = time.perf_counter()
        s = sample_batch(dataset, config.batch_size, rng)
        tape = Tape()
        alphas, theta, loss = _forward(model, m, s, tape)
        g = tape.backward(loss, theta)
        norm = float(np.linalg.norm(_flat(g), ord=p))
        record = IterationRecord(t, 'objective', norm,
                                 predicted_change=predicted_loss_change(config.algo, g, config.lr, config.image_gamma),
                                 penalized=penalty is not None)

        if penalty is not None:
            s_tilde = mix_batches(s, dataset, config.overlap, rng)
            g = tape.backward(loss, theta, create_graph=True)
            post = _post_step_loss(model, theta, g, s_tilde, config)
            criterion = ad.add(post, ad.scalar_mul(grad_norm(g, p), penalty))
            record.objective_loss = post.item()
        elif norm > gamma:
            record.branch = 'constraint'
            g = tape.backward(loss, theta, create_graph=True)
            criterion = grad_norm(g, p)
        else:
            s_tilde = mix_batches(s, dataset, config.overlap, rng)
            criterion = _post_step_loss(model, theta, g, s_tilde, config)
            record.objective_loss = criterion.item()

        grad = _as_vector(tape.backward(criterion, alphas), m.names)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite scale gradient at iteration {t}")
        adam_step(meta, {'alphas': m.alphas}, {'alphas': np.where(m.trainable, grad, 0.0)})
        clamp_scales(m, config.alpha_lower)

        record.clamp_hits = m.clamp_hits
        record.seconds = time.perf_counter() - tick
        report.records.append(record)
        report.second_order_evals += tape.generation
        if m.clamp_hits > len(m) // 2:
            logger.warning(f"Iteration {t}: {m.clamp_hits}/{len(m)} scales clamped to {config.alpha_lower}")
        logger.debug(f"GradInit iter {t}: {record.branch} |g|_{p}={norm:.5g} loss={loss.item():.5g}"
                     + (f" post-step={record.objective_loss:.5g}" if record.objective_loss is not None else ""))
        bar.set_postfix(branch=record.branch[:4], norm=f"{norm:.3g}")

    if model.checksum() != weights:
        raise NumericError("model weights changed during GradInit")
    report.alphas = m.alphas.tolist()
    report.last_grad_norm = report.records[-1].grad_norm
    report.seconds = time.perf_counter() - started
    logger.info(f"GradInit complete: {report.constraint_iterations}/{config.iterations} constraint iterations, "
                f"last |g|_{p}={report.last_grad_norm:.4g}, {report.seconds:.1f}s")
    return m, report


def gradinit_run(model, dataset, config):
    """Constrained GradInit; returns (ScaleVector, GradInitReport). The model's weights are not modified."""
    return _solve(model, dataset, config)


def penalty_run(model, dataset, config, penalty):
    """Gradient-penalty form: every iteration minimizes L~ + penalty * ||g||_p"""
    if penalty < 0:
        raise ConfigError('gradinit.penalty_lambda', f"must be non-negative, got {penalty}")
    return _solve(model, dataset, config, penalty)
