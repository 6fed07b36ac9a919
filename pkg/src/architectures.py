"""Scaled-down analogs of the evaluated network families and the registry that builds them."""
from dataclasses import dataclass, field, asdict
import math

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor
from src.data import BOS
from src.errors import ConfigError, ShapeError
from src.initializers import init_model
from src.nn import (
    BatchNorm, Conv2d, Dense, Embedding, LayerNorm, Model, PostLNDecoderBlock,
    PostLNEncoderBlock, global_avg_pool, softmax_cross_entropy,
)

KINDS = ('mlp', 'plaincnn', 'resnet', 'postln-transformer')


@dataclass
class ArchSpec:
    kind: str = 'mlp'
    widths: list = field(default_factory=lambda: [784, 256, 10])
    use_batchnorm: bool = False
    use_layernorm: bool = False
    blocks_per_stage: list = field(default_factory=list)
    in_channels: int = 3
    num_classes: int = 10
    heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 128
    vocab_size: int = 16
    encoder_layers: int = 2
    decoder_layers: int = 2
    max_len: int = 64
    activation: str = 'relu'

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError('arch.kind', f"must be one of {', '.join(KINDS)}, got {self.kind!r}")
        if self.activation not in ('relu', 'gelu'):
            raise ConfigError('arch.activation', "must be 'relu' or 'gelu'")
        for key in ('in_channels', 'num_classes', 'heads', 'model_dim', 'ffn_dim',
                    'vocab_size', 'encoder_layers', 'decoder_layers', 'max_len'):
            value = getattr(self, key)
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"arch.{key}", f"must be a positive integer, got {value!r}")
        if any(not isinstance(w, int) or w <= 0 for w in self.widths):
            raise ConfigError('arch.widths', "all widths must be positive integers")
        if self.kind == 'mlp' and len(self.widths) < 2:
            raise ConfigError('arch.widths', "an mlp needs at least input and output widths")
        if self.kind in ('plaincnn', 'resnet') and not self.widths:
            raise ConfigError('arch.widths', "at least one channel width is required")
        if self.kind == 'resnet':
            if len(self.blocks_per_stage) != len(self.widths):
                raise ConfigError('arch.blocks_per_stage', "needs one block count per stage width")
            if any(not isinstance(b, int) or b <= 0 for b in self.blocks_per_stage):
                raise ConfigError('arch.blocks_per_stage', "block counts must be positive integers")
        if self.kind == 'postln-transformer':
            if self.model_dim % self.heads:
                raise ConfigError('arch.heads', f"{self.heads} heads do not divide model_dim {self.model_dim}")
            if not self.use_layernorm:
                raise ConfigError('arch.use_layernorm', "the Post-LN transformer always uses LayerNorm")
            if self.vocab_size < 3:
                raise ConfigError('arch.vocab_size', "pad/bos/eos need at least 3 token ids")
        return self

    def to_dict(self):
        return asdict(self)


class MLPNet:
    def __init__(self, spec):
        self.layers = []
        widths = spec.widths
        last = len(widths) - 2
        for i in range(len(widths) - 1):
            hidden = i < last
            self.layers.append(Dense(f"fc{i}", widths[i], widths[i + 1],
                                     bias=not (hidden and (spec.use_batchnorm or spec.use_layernorm))))
            if hidden:
                if spec.use_batchnorm:
                    self.layers.append(BatchNorm(f"bn{i}", widths[i + 1]))
                elif spec.use_layernorm:
                    self.layers.append(LayerNorm(f"ln{i}", widths[i + 1]))
                self.layers.append(ad.gelu if spec.activation == 'gelu' else ad.relu)

    def param_blocks(self):
        return [b for layer in self.layers if hasattr(layer, 'param_blocks') for b in layer.param_blocks()]

    def __call__(self, params, batch, ctx):
        x = Tensor(np.asarray(batch.inputs).reshape(len(batch.inputs), -1))
        for layer in self.layers:
            x = layer(params, x, ctx) if hasattr(layer, 'param_blocks') else layer(x)
        return x

    def loss(self, logits, batch):
        return softmax_cross_entropy(logits, batch.targets)


class PlainCNN:
    """VGG-style stack of 3x3 convs; stride 2 wherever the width grows"""

    def __init__(self, spec):
        self.stages = []
        in_c = spec.in_channels
        for i, width in enumerate(spec.widths):
            stride = 2 if i > 0 and width > spec.widths[i - 1] else 1
            conv = Conv2d(f"conv{i}", in_c, width, stride=stride, bias=not spec.use_batchnorm)
            norm = BatchNorm(f"bn{i}", width, spatial=True) if spec.use_batchnorm else None
            self.stages.append((conv, norm))
            in_c = width
        self.fc = Dense('fc', in_c, spec.num_classes)

    def param_blocks(self):
        blocks = []
        for conv, norm in self.stages:
            blocks += conv.param_blocks() + (norm.param_blocks() if norm else [])
        return blocks + self.fc.param_blocks()

    def __call__(self, params, batch, ctx):
        x = Tensor(batch.inputs)
        for conv, norm in self.stages:
            x = conv(params, x)
            if norm is not None:
                x = norm(params, x, ctx)
            x = ad.relu(x)
        return self.fc(params, global_avg_pool(x))

    def loss(self, logits, batch):
        return softmax_cross_entropy(logits, batch.targets)


class ResidualBlock:
    def __init__(self, name, in_c, out_c, stride, use_bn):
        self.name = name
        self.stride = stride
        self.pad_channels = out_c - in_c
        self.conv1 = Conv2d(f"{name}.conv1", in_c, out_c, stride=stride, bias=not use_bn)
        self.bn1 = BatchNorm(f"{name}.bn1", out_c, spatial=True) if use_bn else None
        self.conv2 = Conv2d(f"{name}.conv2", out_c, out_c, bias=not use_bn)
        self.bn2 = BatchNorm(f"{name}.bn2", out_c, spatial=True) if use_bn else None

    def param_blocks(self):
        blocks = self.conv1.param_blocks() + (self.bn1.param_blocks() if self.bn1 else [])
        return blocks + self.conv2.param_blocks() + (self.bn2.param_blocks() if self.bn2 else [])

    def shortcut(self, x):
        if self.stride > 1:
            x = ad.slice_(x, (slice(None), slice(None), slice(None, None, self.stride), slice(None, None, self.stride)))
        if self.pad_channels:
            n, _, h, w = x.shape
            x = ad.concat([x, Tensor(np.zeros((n, self.pad_channels, h, w)))], axis=1)
        return x

    def __call__(self, params, x, ctx):
        y = self.conv1(params, x)
        if self.bn1 is not None:
            y = self.bn1(params, y, ctx)
        y = self.conv2(params, ad.relu(y))
        if self.bn2 is not None:
            y = self.bn2(params, y, ctx)
        return ad.relu(ad.add(y, self.shortcut(x)))


class ResNet:
    """CIFAR-style ResNet; parameter-free shortcuts keep every conv 3x3"""

    def __init__(self, spec):
        self.stem = Conv2d('conv1', spec.in_channels, spec.widths[0], bias=not spec.use_batchnorm)
        self.stem_bn = BatchNorm('bn1', spec.widths[0], spatial=True) if spec.use_batchnorm else None
        self.residual_blocks = []
        in_c = spec.widths[0]
        for s, (width, count) in enumerate(zip(spec.widths, spec.blocks_per_stage)):
            for b in range(count):
                stride = 2 if s > 0 and b == 0 else 1
                self.residual_blocks.append(ResidualBlock(f"layer{s + 1}.{b}", in_c, width, stride, spec.use_batchnorm))
                in_c = width
        self.fc = Dense('fc', in_c, spec.num_classes)

    def param_blocks(self):
        blocks = self.stem.param_blocks() + (self.stem_bn.param_blocks() if self.stem_bn else [])
        for block in self.residual_blocks:
            blocks += block.param_blocks()
        return blocks + self.fc.param_blocks()

    def __call__(self, params, batch, ctx):
        x = self.stem(params, Tensor(batch.inputs))
        if self.stem_bn is not None:
            x = self.stem_bn(params, x, ctx)
        x = ad.relu(x)
        for block in self.residual_blocks:
            x = block(params, x, ctx)
        return self.fc(params, global_avg_pool(x))

    def loss(self, logits, batch):
        return softmax_cross_entropy(logits, batch.targets)


def sinusoidal_positions(length, dim):
    positions = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: dim // 2])
    return table


class PostLNTransformer:
    """Encoder-decoder transformer with LayerNorm after each residual sum.

    Batches carry source tokens as inputs and the target sequence (ending in
    EOS) as targets; the decoder reads BOS followed by the shifted targets.
    """

    def __init__(self, spec):
        self.dim = spec.model_dim
        self.src_embed = Embedding('encoder.embed_tokens', spec.vocab_size, spec.model_dim)
        self.tgt_embed = Embedding('decoder.embed_tokens', spec.vocab_size, spec.model_dim)
        self.encoder = [PostLNEncoderBlock(f"encoder.layers.{i}", spec.model_dim, spec.heads, spec.ffn_dim, spec.activation)
                        for i in range(spec.encoder_layers)]
        self.decoder = [PostLNDecoderBlock(f"decoder.layers.{i}", spec.model_dim, spec.heads, spec.ffn_dim, spec.activation)
                        for i in range(spec.decoder_layers)]
        self.output = Dense('decoder.output_projection', spec.model_dim, spec.vocab_size, bias=False)
        self.positions = sinusoidal_positions(spec.max_len, spec.model_dim)

    def param_blocks(self):
        blocks = self.src_embed.param_blocks()
        for layer in self.encoder:
            blocks += layer.param_blocks()
        blocks += self.tgt_embed.param_blocks()
        for layer in self.decoder:
            blocks += layer.param_blocks()
        return blocks + self.output.param_blocks()

    def _embed(self, params, embedding, tokens):
        length = tokens.shape[1]
        if length > self.positions.shape[0]:
            raise ShapeError(f"sequence length {length} exceeds max_len {self.positions.shape[0]}")
        x = ad.scalar_mul(embedding(params, tokens), math.sqrt(self.dim))
        return ad.add(x, Tensor(self.positions[:length]))

    def __call__(self, params, batch, ctx):
        src = np.asarray(batch.inputs, dtype=np.int64)
        tgt = np.asarray(batch.targets, dtype=np.int64)
        dec_in = np.concatenate([np.full((len(tgt), 1), BOS), tgt[:, :-1]], axis=1)

        memory = self._embed(params, self.src_embed, src)
        for layer in self.encoder:
            memory = layer(params, memory)

        t = dec_in.shape[1]
        causal = np.triu(np.full((t, t), -1e9), k=1)
        y = self._embed(params, self.tgt_embed, dec_in)
        for layer in self.decoder:
            y = layer(params, y, memory=memory, mask=causal)
        return self.output(params, y)

    def loss(self, logits, batch):
        b, t, v = logits.shape
        return softmax_cross_entropy(ad.reshape(logits, (b * t, v)), np.asarray(batch.targets).reshape(-1))


NETWORKS = {
    'mlp': MLPNet,
    'plaincnn': PlainCNN,
    'resnet': ResNet,
    'postln-transformer': PostLNTransformer,
}


def build_model(spec, seed=0):
    """Build and default-initialize a model: Kaiming for conv/fc, Xavier for the transformer"""
    spec.validate()
    model = Model(NETWORKS[spec.kind](spec), spec)
    init_model(model, 'xavier' if spec.kind == 'postln-transformer' else 'kaiming', seed)
    return model
