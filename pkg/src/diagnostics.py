"""Per-layer weight and gradient profiles and the BatchNorm gradient-magnification probe."""
from dataclasses import dataclass, field, asdict
import csv
import os

import numpy as np

from src.autodiff import Tape
from src.errors import ArtifactError, ConfigError, DataError, ShapeError
from src.logger import logger
from src.utils import ensure_dir, write_artifact, write_sidecar

PROFILE_COLUMNS = ('block_name', 'role', 'weight_mag', 'grad_std', 'grad_rel_std')
DEFAULT_BATCHES = 16
REL_FLOOR = 1e-12


@dataclass
class ProfileRecord:
    block_name: str
    role: str
    weight_mag: float
    grad_std: float = None
    grad_rel_std: float = None


@dataclass
class LayerProfile:
    records: list = field(default_factory=list)
    label: str = ''

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def to_dict(self):
        return {'label': self.label, 'records': [asdict(r) for r in self.records]}

    @classmethod
    def from_dict(cls, document):
        return cls([ProfileRecord(**r) for r in document['records']], document.get('label', ''))


def weight_norm_profile(model, label=''):
    """||W_i||_2 / d_i per block, d_i being the element count"""
    return LayerProfile([
        ProfileRecord(b.name, b.role, float(np.linalg.norm(b.data.ravel())) / b.size)
        for b in model.blocks
    ], label)


def grad_variance_profile(model, dataset, batches=DEFAULT_BATCHES, batch_size=128, seed=0, label=''):
    """Cross-batch gradient spread per block, BN in training mode.

    Gradients are taken on ``batches`` disjoint seeded minibatches. grad_std is
    the square root of the per-element variance across batches averaged over
    elements; grad_rel_std divides it by the block's mean absolute gradient.
    """
    if batches < 2:
        raise ConfigError('diagnostics.batches', f"need at least 2 batches, got {batches}")
    needed = batches * batch_size
    if needed > len(dataset):
        raise DataError(f"{batches} disjoint batches of {batch_size} need {needed} examples, have {len(dataset)}")
    order = np.random.default_rng(seed).permutation(len(dataset))[:needed].reshape(batches, batch_size)

    stacked = {b.name: [] for b in model.blocks}
    for indices in order:
        tape = Tape()
        params = model.variables(tape)
        loss = model.forward_loss(dataset.batch(indices), 'train', params)
        for name, g in tape.backward(loss, params).items():
            stacked[name].append(g.data)

    profile = weight_norm_profile(model, label)
    for record in profile.records:
        grads = np.stack(stacked[record.block_name])
        record.grad_std = float(np.sqrt(grads.var(axis=0).mean()))
        record.grad_rel_std = record.grad_std / max(float(np.abs(grads).mean()), REL_FLOOR)
    logger.debug(f"Gradient profile over {batches}x{batch_size} examples: "
                 f"first/last grad_std {profile.records[0].grad_std:.3g}/{profile.records[-1].grad_std:.3g}")
    return profile


def bn_backward_analytic(x, dy, gamma=1.0, eps=1e-5):
    """Closed-form dL/dx of training-mode BatchNorm over axis 0 (biased variance)"""
    x = np.asarray(x, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    if x.shape != dy.shape or x.ndim != 2:
        raise ShapeError(f"expected matching (n, d) arrays, got {x.shape} and {dy.shape}")
    n = x.shape[0]
    std = np.sqrt(x.var(axis=0) + eps)
    xhat = (x - x.mean(axis=0)) / std
    dxhat = dy * gamma
    return (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)) / (n * std)


def bn_magnification_probe(n, d, alpha, trials=200, sigma=1.0, eps=1e-8, seed=0):
    """Monte-Carlo Var[dL/dx] / Var[dL/dy] for a BatchNorm with unit scale and zero shift.

    Inputs are standardized per column and scaled so the batch variance is
    exactly (alpha * sigma)^2; upstream gradients are i.i.d. standard normal.
    ``frac_magnified`` is the share of trials whose own ratio exceeds one.
    """
    if n < 2 or d < 1:
        raise ConfigError('diagnostics.probe', f"need n >= 2 and d >= 1, got n={n}, d={d}")
    if trials < 100:
        raise ConfigError('diagnostics.probe', f"need at least 100 trials, got {trials}")
    if not alpha > 0 or not sigma > 0:
        raise ConfigError('diagnostics.probe', "alpha and sigma must be positive")
    rng = np.random.default_rng(seed)
    dx_all, dy_all, magnified = [], [], 0
    for _ in range(trials):
        z = rng.standard_normal((n, d))
        z = (z - z.mean(axis=0)) / z.std(axis=0)
        dy = rng.standard_normal((n, d))
        dx = bn_backward_analytic(alpha * sigma * z, dy, 1.0, eps)
        magnified += int(np.var(dx) > np.var(dy))
        dx_all.append(dx)
        dy_all.append(dy)
    input_var = (alpha * sigma) ** 2
    return {
        'n': n,
        'd': d,
        'alpha': alpha,
        'input_var': input_var,
        'var_ratio': float(np.var(np.concatenate(dx_all)) / np.var(np.concatenate(dy_all))),
        'frac_magnified': magnified / trials,
        'lower_bound': n * (n - 1) / (n ** 2 * (input_var + eps)),
        'predicted_magnify': bool(input_var < (n - 1) / n),
    }


def _fmt(value):
    return '' if value is None else f"{value:.9g}"


def emit_profiles(profile, path, fmt='csv', config=None):
    """Write a profile as CSV (plus .meta.json sidecar) or as a JSON artifact"""
    if fmt == 'json':
        return write_artifact(path, profile.to_dict(), config)
    if fmt != 'csv':
        raise ConfigError('diagnostics.format', f"must be 'csv' or 'json', got {fmt!r}")
    try:
        ensure_dir(os.path.dirname(path) or '.')
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(PROFILE_COLUMNS)
            for r in profile.records:
                writer.writerow([r.block_name, r.role, _fmt(r.weight_mag), _fmt(r.grad_std), _fmt(r.grad_rel_std)])
    except OSError as e:
        raise ArtifactError(f"Cannot write {path}: {e}") from e
    write_sidecar(path, config)
    logger.info(f"Wrote {len(profile)} profile rows to {path}")
    return path


def emit_scales(scales, path, config=None):
    """scale_factors.csv: block_name, alpha"""
    try:
        ensure_dir(os.path.dirname(path) or '.')
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(('block_name', 'alpha'))
            for name, alpha in zip(scales.names, scales.alphas):
                writer.writerow([name, _fmt(float(alpha))])
    except OSError as e:
        raise ArtifactError(f"Cannot write {path}: {e}") from e
    write_sidecar(path, config)
    return path
