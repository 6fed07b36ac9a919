"""Classical initializers GradInit starts from."""
import math

import numpy as np

from src.errors import ConfigError
from src.logger import logger

WEIGHT_ROLES = ('conv-kernel', 'fc-weight')
METHODS = ('kaiming', 'xavier', 'fixup')


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def kaiming_init(block, fan_in=None, seed=0):
    """Zero-mean Gaussian with std sqrt(2 / fan_in); returns the std"""
    fan_in = block.fan_in if fan_in is None else fan_in
    if block.role not in WEIGHT_ROLES:
        raise ConfigError(block.name, f"Kaiming init applies to conv/fc weights, not {block.role}")
    if fan_in <= 0:
        raise ConfigError(block.name, f"fan_in must be positive, got {fan_in}")
    std = math.sqrt(2.0 / fan_in)
    block.data[...] = _rng(seed).normal(0.0, std, block.shape)
    return std


def xavier_init(block, fan_in=None, fan_out=None, seed=0):
    """Uniform on +-sqrt(6 / (fan_in + fan_out)); returns the bound"""
    fan_in = block.fan_in if fan_in is None else fan_in
    fan_out = block.fan_out if fan_out is None else fan_out
    if block.role not in WEIGHT_ROLES:
        raise ConfigError(block.name, f"Xavier init applies to conv/fc weights, not {block.role}")
    if fan_in <= 0 or fan_out <= 0:
        raise ConfigError(block.name, f"fan_in and fan_out must be positive, got {fan_in}, {fan_out}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    block.data[...] = _rng(seed).uniform(-bound, bound, block.shape)
    return bound


def embedding_init(block, seed=0):
    """N(0, dim^-1/2) token embeddings"""
    block.data[...] = _rng(seed).normal(0.0, block.shape[-1] ** -0.5, block.shape)


def fixup_init(model):
    """Rescale a norm-free ResNet on top of its Kaiming draws.

    The first conv of every residual block is scaled by 1/sqrt(M), the second
    conv and the final FC layer are zeroed (M = number of residual blocks).
    """
    arch = model.arch
    if arch is None or arch.kind != 'resnet' or arch.use_batchnorm:
        raise ConfigError('init', "FixUp needs a resnet without normalization layers")
    blocks = model.network.residual_blocks
    scale = 1.0 / math.sqrt(len(blocks))
    for residual in blocks:
        residual.conv1.weight.data[...] *= scale
        residual.conv2.weight.data[...] = 0.0
    model.network.fc.weight.data[...] = 0.0
    if model.network.fc.bias is not None:
        model.network.fc.bias.data[...] = 0.0
    logger.debug(f"FixUp: {len(blocks)} residual blocks, first-conv scale {scale:.4f}")


def init_model(model, method='kaiming', seed=0):
    """(Re)draw every block: weights by ``method``, biases 0, norm scales 1, norm biases 0"""
    if method not in METHODS:
        raise ConfigError('init', f"unknown initializer {method!r}")
    rng = _rng(seed)
    for block in model.blocks:
        if block.role in WEIGHT_ROLES:
            if method == 'xavier':
                xavier_init(block, seed=rng)
            else:
                kaiming_init(block, seed=rng)
        elif block.role == 'embedding':
            embedding_init(block, seed=rng)
        elif block.role == 'norm-scale':
            block.data[...] = 1.0
        else:
            block.data[...] = 0.0
    if method == 'fixup':
        fixup_init(model)
    return model
