"""Parameter blocks, layers and the Model container.

Layers own ParamBlocks but never hold differentiable state themselves: a
forward pass receives a ``params`` mapping (block name -> Tensor) so the same
network can run on plain weights, on tape variables for training, or on the
rescaled view ``alpha_i * W_i`` that GradInit differentiates through.
"""
from dataclasses import dataclass
import hashlib
import math

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor
from src.errors import ShapeError

ROLES = ('conv-kernel', 'fc-weight', 'bias', 'norm-scale', 'norm-bias', 'embedding')
NORM_ROLES = ('norm-scale', 'norm-bias')

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5


@dataclass
class ParamBlock:
    name: str
    tensor: Tensor
    role: str
    fan_in: int = 0
    fan_out: int = 0

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"Unknown parameter role {self.role!r} for {self.name}")

    @property
    def data(self):
        return self.tensor.data

    @property
    def shape(self):
        return self.tensor.shape

    @property
    def size(self):
        return self.tensor.size


def _block(name, shape, role, fill=0.0, fan_in=0, fan_out=0):
    return ParamBlock(name, Tensor(np.full(shape, fill)), role, fan_in, fan_out)


@dataclass
class Context:
    mode: str = 'train'
    update_stats: bool = False


# Functional kernels

def batchnorm_forward(x, scale, shift, eps=BN_EPS, axes=(0,)):
    """Training-mode BatchNorm with biased batch variance.

    Returns (y, batch_mean, batch_var); statistics are numpy arrays shaped
    like ``scale``.
    """
    x = ad._lift(x)
    count = int(np.prod([x.shape[a] for a in axes]))
    if count < 2:
        raise ShapeError(f"BatchNorm needs at least 2 values per channel, got {count}")
    bshape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    mu = ad.mean(x, axes, keepdims=True)
    variance = ad.var(x, axes, keepdims=True)
    xhat = ad.div(ad.sub(x, mu), ad.sqrt(ad.add(variance, eps)))
    y = ad.add(ad.mul(xhat, ad.reshape(scale, bshape)), ad.reshape(shift, bshape))
    return y, mu.data.reshape(-1), variance.data.reshape(-1)


def layernorm_forward(x, scale, shift, eps=LN_EPS):
    """Normalize over the last axis"""
    mu = ad.mean(x, -1, keepdims=True)
    variance = ad.var(x, -1, keepdims=True)
    xhat = ad.div(ad.sub(x, mu), ad.sqrt(ad.add(variance, eps)))
    return ad.add(ad.mul(xhat, scale), shift)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of (N, K) logits against integer labels"""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"label out of range [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.sum_(ad.mul(ad.log_softmax(logits, -1), Tensor(onehot)))
    return ad.scalar_mul(picked, -1.0 / n)


def scaled_dot_product_attention(q, k, v, mask=None):
    """q, k, v: (B, H, T, dh); mask is an additive constant broadcast onto the scores"""
    scores = ad.scalar_mul(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = ad.add(scores, Tensor(mask))
    return ad.matmul(ad.softmax(scores, -1), v)


# Layers

class Layer:
    def __init__(self, name):
        self.name = name

    def param_blocks(self):
        return []

    def __call__(self, params, x, ctx):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, name, in_features, out_features, bias=True):
        super().__init__(name)
        self.weight = _block(f"{name}.weight", (in_features, out_features), 'fc-weight',
                             fan_in=in_features, fan_out=out_features)
        self.bias = _block(f"{name}.bias", (out_features,), 'bias') if bias else None

    def param_blocks(self):
        return [self.weight] + ([self.bias] if self.bias else [])

    def __call__(self, params, x, ctx=None):
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"{self.name} expects {self.weight.shape[0]} features, got {x.shape[-1]}")
        y = ad.matmul(x, params[self.weight.name])
        if self.bias is not None:
            y = ad.add(y, params[self.bias.name])
        return y


class Conv2d(Layer):
    """3x3 convolution with zero padding 1"""

    def __init__(self, name, in_channels, out_channels, stride=1, bias=True, kernel=3):
        super().__init__(name)
        self.stride = stride
        self.padding = kernel // 2
        self.weight = _block(f"{name}.weight", (out_channels, in_channels, kernel, kernel), 'conv-kernel',
                             fan_in=in_channels * kernel * kernel, fan_out=out_channels * kernel * kernel)
        self.bias = _block(f"{name}.bias", (out_channels,), 'bias') if bias else None

    def param_blocks(self):
        return [self.weight] + ([self.bias] if self.bias else [])

    def __call__(self, params, x, ctx=None):
        y = ad.conv2d(x, params[self.weight.name], stride=self.stride, padding=self.padding)
        if self.bias is not None:
            y = ad.add(y, ad.reshape(params[self.bias.name], (1, -1, 1, 1)))
        return y


class BatchNorm(Layer):
    """BatchNorm over (N, D) or (N, C, H, W) inputs"""

    def __init__(self, name, channels, spatial=False, eps=BN_EPS, momentum=BN_MOMENTUM):
        super().__init__(name)
        self.axes = (0, 2, 3) if spatial else (0,)
        self.eps = eps
        self.momentum = momentum
        self.scale = _block(f"{name}.weight", (channels,), 'norm-scale', fill=1.0)
        self.shift = _block(f"{name}.bias", (channels,), 'norm-bias', fill=0.0)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def param_blocks(self):
        return [self.scale, self.shift]

    def __call__(self, params, x, ctx):
        scale, shift = params[self.scale.name], params[self.shift.name]
        if ctx.mode == 'train':
            y, mu, variance = batchnorm_forward(x, scale, shift, self.eps, self.axes)
            if ctx.update_stats:
                self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
                self.running_var = (1 - self.momentum) * self.running_var + self.momentum * variance
            return y
        bshape = tuple(1 if i in self.axes else s for i, s in enumerate(x.shape))
        inv = Tensor((1.0 / np.sqrt(self.running_var + self.eps)).reshape(bshape))
        xhat = ad.mul(ad.sub(x, Tensor(self.running_mean.reshape(bshape))), inv)
        return ad.add(ad.mul(xhat, ad.reshape(scale, bshape)), ad.reshape(shift, bshape))


class LayerNorm(Layer):
    def __init__(self, name, dim, eps=LN_EPS):
        super().__init__(name)
        self.eps = eps
        self.scale = _block(f"{name}.weight", (dim,), 'norm-scale', fill=1.0)
        self.shift = _block(f"{name}.bias", (dim,), 'norm-bias', fill=0.0)

    def param_blocks(self):
        return [self.scale, self.shift]

    def __call__(self, params, x, ctx=None):
        return layernorm_forward(x, params[self.scale.name], params[self.shift.name], self.eps)


class Embedding(Layer):
    def __init__(self, name, vocab, dim):
        super().__init__(name)
        self.weight = _block(f"{name}.weight", (vocab, dim), 'embedding', fan_in=vocab, fan_out=dim)

    def param_blocks(self):
        return [self.weight]

    def __call__(self, params, tokens, ctx=None):
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.weight.shape[0]):
            raise ShapeError(f"{self.name}: token id out of range [0, {self.weight.shape[0]})")
        return ad.gather(params[self.weight.name], tokens)


class MultiHeadAttention(Layer):
    def __init__(self, name, dim, heads):
        super().__init__(name)
        if dim % heads:
            raise ShapeError(f"{name}: {heads} heads do not divide model dim {dim}")
        self.heads = heads
        self.q = Dense(f"{name}.q_proj", dim, dim)
        self.k = Dense(f"{name}.k_proj", dim, dim)
        self.v = Dense(f"{name}.v_proj", dim, dim)
        self.out = Dense(f"{name}.out_proj", dim, dim)

    def param_blocks(self):
        return self.q.param_blocks() + self.k.param_blocks() + self.v.param_blocks() + self.out.param_blocks()

    def _split(self, x):
        b, t, d = x.shape
        return ad.transpose(ad.reshape(x, (b, t, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, params, x, ctx=None, memory=None, mask=None):
        memory = x if memory is None else memory
        q = self._split(self.q(params, x))
        k = self._split(self.k(params, memory))
        v = self._split(self.v(params, memory))
        context = scaled_dot_product_attention(q, k, v, mask)
        b, h, t, dh = context.shape
        merged = ad.reshape(ad.transpose(context, (0, 2, 1, 3)), (b, t, h * dh))
        return self.out(params, merged)


class FeedForward(Layer):
    def __init__(self, name, dim, hidden, activation='relu'):
        super().__init__(name)
        self.fc1 = Dense(f"{name}.fc1", dim, hidden)
        self.fc2 = Dense(f"{name}.fc2", hidden, dim)
        self.activation = ad.gelu if activation == 'gelu' else ad.relu

    def param_blocks(self):
        return self.fc1.param_blocks() + self.fc2.param_blocks()

    def __call__(self, params, x, ctx=None):
        return self.fc2(params, self.activation(self.fc1(params, x)))


class PostLNEncoderBlock(Layer):
    """x = LN(x + SelfAttn(x)); x = LN(x + FFN(x))"""

    def __init__(self, name, dim, heads, hidden, activation='relu'):
        super().__init__(name)
        self.self_attn = MultiHeadAttention(f"{name}.self_attn", dim, heads)
        self.ln1 = LayerNorm(f"{name}.self_attn_layer_norm", dim)
        self.ffn = FeedForward(f"{name}.ffn", dim, hidden, activation)
        self.ln2 = LayerNorm(f"{name}.final_layer_norm", dim)

    def param_blocks(self):
        return (self.self_attn.param_blocks() + self.ln1.param_blocks()
                + self.ffn.param_blocks() + self.ln2.param_blocks())

    def __call__(self, params, x, ctx=None, mask=None):
        x = self.ln1(params, ad.add(x, self.self_attn(params, x, mask=mask)))
        return self.ln2(params, ad.add(x, self.ffn(params, x)))


class PostLNDecoderBlock(Layer):
    """Causal self-attention, cross-attention and FFN, each followed by add & LayerNorm"""

    def __init__(self, name, dim, heads, hidden, activation='relu'):
        super().__init__(name)
        self.self_attn = MultiHeadAttention(f"{name}.self_attn", dim, heads)
        self.ln1 = LayerNorm(f"{name}.self_attn_layer_norm", dim)
        self.cross_attn = MultiHeadAttention(f"{name}.encoder_attn", dim, heads)
        self.ln2 = LayerNorm(f"{name}.encoder_attn_layer_norm", dim)
        self.ffn = FeedForward(f"{name}.ffn", dim, hidden, activation)
        self.ln3 = LayerNorm(f"{name}.final_layer_norm", dim)

    def param_blocks(self):
        return (self.self_attn.param_blocks() + self.ln1.param_blocks()
                + self.cross_attn.param_blocks() + self.ln2.param_blocks()
                + self.ffn.param_blocks() + self.ln3.param_blocks())

    def __call__(self, params, y, ctx=None, memory=None, mask=None):
        y = self.ln1(params, ad.add(y, self.self_attn(params, y, mask=mask)))
        y = self.ln2(params, ad.add(y, self.cross_attn(params, y, memory=memory)))
        return self.ln3(params, ad.add(y, self.ffn(params, y)))


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C)"""
    return ad.mean(x, (2, 3))


# Model

class Model:
    """Ordered parameter blocks plus a network mapping (params, batch) to logits."""

    def __init__(self, network, arch=None):
        self.network = network
        self.arch = arch
        self.blocks = list(network.param_blocks())
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter block names")
        self._index = {b.name: b for b in self.blocks}

    def __len__(self):
        return len(self.blocks)

    def block(self, name):
        return self._index[name]

    def block_names(self):
        return [b.name for b in self.blocks]

    def parameter_count(self):
        return sum(b.size for b in self.blocks)

    def constants(self):
        return {b.name: b.tensor for b in self.blocks}

    def variables(self, tape):
        return {b.name: tape.variable(b.tensor) for b in self.blocks}

    def state(self):
        return {b.name: b.data.copy() for b in self.blocks}

    def load_state(self, state):
        for b in self.blocks:
            if state[b.name].shape != b.shape:
                raise ShapeError(f"{b.name}: shape {state[b.name].shape} does not match {b.shape}")
            b.tensor = Tensor(np.array(state[b.name]))

    def checksum(self):
        digest = hashlib.sha256()
        for b in self.blocks:
            digest.update(b.name.encode())
            digest.update(np.ascontiguousarray(b.data).tobytes())
        return digest.hexdigest()

    def forward(self, batch, mode='train', params=None, update_stats=False):
        """Returns (logits, mean loss) for a batch"""
        ctx = Context(mode, update_stats)
        logits = self.network(self.constants() if params is None else params, batch, ctx)
        return logits, self.network.loss(logits, batch)

    def forward_loss(self, batch, mode='train', params=None, update_stats=False):
        return self.forward(batch, mode, params, update_stats)[1]


def forward_loss(model, batch, mode='train', params=None):
    return model.forward_loss(batch, mode, params)


def predict(model, batch):
    """Argmax predictions in eval mode"""
    logits, _ = model.forward(batch, mode='eval')
    return logits.data.argmax(axis=-1)


def accuracy(model, batch):
    """Fraction of correct classes, or of correct tokens for sequence batches"""
    predictions = predict(model, batch)
    return float(np.mean(predictions == np.asarray(batch.targets)))
