"""Finite-difference verification of every primitive, every layer and double backward."""
from dataclasses import dataclass, field, asdict

import numpy as np
from tqdm import tqdm

from config.settings import settings
from src import autodiff as ad
from src.architectures import ArchSpec, build_model
from src.autodiff import Tape, Tensor, finite_diff_check
from src.data import Batch
from src.logger import logger
from src.nn import (
    BatchNorm, Context, Conv2d, Dense, Embedding, FeedForward, LayerNorm, MultiHeadAttention,
    PostLNDecoderBlock, PostLNEncoderBlock, scaled_dot_product_attention, softmax_cross_entropy,
)

TOLERANCE = 1e-6
SECOND_ORDER_TOLERANCE = 1e-4
MAX_REDRAWS = 20
SMALL_GRADIENT = (1e-12, 1e-3)
# a key bias shifts every score of a query by the same amount, so softmax
# cancels it and its gradient is exactly zero
INERT_SUFFIX = 'k_proj.bias'
INERT_TOLERANCE = 1e-12


@dataclass
class CaseResult:
    name: str
    kind: str
    instances: int
    max_rel_err: float
    tol: float
    redraws: int = 0

    @property
    def passed(self):
        return self.max_rel_err < self.tol

    def to_dict(self):
        return {**asdict(self), 'passed': self.passed}


@dataclass
class GradcheckReport:
    cases: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.cases)

    @property
    def failures(self):
        return [c.name for c in self.cases if not c.passed]

    def to_dict(self):
        return {'passed': self.passed, 'failures': self.failures, 'cases': [c.to_dict() for c in self.cases]}


# Sampling helpers

def _away(rng, shape, low=0.1, high=1.0):
    """Values with |x| in [low, high] and random sign"""
    return rng.uniform(low, high, shape) * rng.choice([-1.0, 1.0], shape)


def _positive(rng, shape, low=0.5, high=2.0):
    return rng.uniform(low, high, shape)


def _distinct(rng, shape, gap=1e-3):
    while True:
        x = rng.normal(0.0, 1.0, shape)
        if np.min(np.diff(np.sort(x.ravel()))) > gap:
            return x


def _projected(fn, point, rng):
    """Scalar <fn(v), R> with fixed random weights R of magnitude in [0.5, 1.5]"""
    shape = fn({k: Tensor(v) for k, v in point.items()}).shape
    weights = Tensor(_away(rng, shape, 0.5, 1.5))
    return lambda v: ad.sum_(ad.mul(fn(v), weights))


# Primitive cases: name -> rng -> (fn, point)

def _unary(op, sample):
    return lambda rng: (lambda v: op(v['x']), {'x': sample(rng)})


def _binary(op, sample_a, sample_b):
    return lambda rng: (lambda v: op(v['a'], v['b']), {'a': sample_a(rng), 'b': sample_b(rng)})


def _N(*shape):
    return lambda rng: rng.normal(0.0, 1.0, shape)


PRIMITIVES = {
    'add': _binary(ad.add, _N(3, 4), _N(4)),
    'sub': _binary(ad.sub, _N(3, 4), _N(3, 1)),
    'mul': _binary(ad.mul, _N(3, 4), _N(1, 4)),
    'div': _binary(ad.div, _N(3, 4), lambda rng: _positive(rng, (3, 4))),
    'scalar_mul': _unary(lambda x: ad.scalar_mul(x, 1.7), _N(3, 4)),
    'matmul': _binary(ad.matmul, _N(2, 3, 4), _N(4, 2)),
    'sum_to': _unary(lambda x: ad.sum_to(x, (1, 4)), _N(3, 4)),
    'broadcast_to': _unary(lambda x: ad.broadcast_to(x, (3, 4)), _N(1, 4)),
    'reshape': _unary(lambda x: ad.reshape(x, (2, 6)), _N(3, 4)),
    'transpose': _unary(lambda x: ad.transpose(x, (2, 0, 1)), _N(2, 3, 4)),
    'swap_last': _unary(ad.swap_last, _N(2, 3, 4)),
    'slice': _unary(lambda x: ad.slice_(x, (slice(1, None), slice(None, None, 2))), _N(3, 4)),
    'embed': _unary(lambda x: ad.embed(x, (4, 4), (slice(1, 3), slice(0, 4, 2))), _N(2, 2)),
    'concat': _binary(lambda a, b: ad.concat([a, b], axis=1), _N(2, 3), _N(2, 2)),
    'relu': _unary(ad.relu, lambda rng: _away(rng, (3, 4))),
    'tanh': _unary(ad.tanh, _N(3, 4)),
    'gelu': _unary(ad.gelu, lambda rng: rng.uniform(0.2, 2.0, (3, 4))),
    'exp': _unary(ad.exp, lambda rng: rng.uniform(-1.0, 1.0, (3, 4))),
    'log': _unary(ad.log, lambda rng: _positive(rng, (3, 4))),
    'sqrt': _unary(ad.sqrt, lambda rng: _positive(rng, (3, 4))),
    'power': _unary(lambda x: ad.power(x, 2.5), lambda rng: _positive(rng, (3, 4))),
    'abs': _unary(ad.abs_, lambda rng: _away(rng, (3, 4))),
    'sum': _unary(lambda x: ad.sum_(x, 1), _N(3, 4)),
    'mean': _unary(lambda x: ad.mean(x, (0, 2)), _N(2, 3, 4)),
    'var': _unary(lambda x: ad.var(x, 0), _N(4, 3)),
    'max': _unary(lambda x: ad.max_(x, 1), lambda rng: _distinct(rng, (3, 4))),
    'softmax': _unary(lambda x: ad.softmax(x, -1), _N(3, 4)),
    'log_softmax': _unary(lambda x: ad.log_softmax(x, -1), _N(3, 4)),
    'gather': _unary(lambda x: ad.gather(x, [0, 2, 2, 4]), _N(5, 3)),
    'scatter_add': _unary(lambda x: ad.scatter_add(x, np.array([0, 2, 2, 4]), (5, 3)), _N(4, 3)),
    'unfold2d': _unary(lambda x: ad.unfold2d(x, 3, 3, 1), _N(1, 2, 4, 4)),
    'unfold2d_stride2': _unary(lambda x: ad.unfold2d(x, 3, 3, 2), _N(1, 2, 5, 5)),
    'fold2d': _unary(lambda x: ad.fold2d(x, (1, 2, 4, 4), 3, 3, 1), _N(1, 18, 4)),
    'conv2d': _binary(lambda a, b: ad.conv2d(a, b, 1, 1), _N(2, 2, 4, 4), _N(3, 2, 3, 3)),
    'conv2d_stride2': _binary(lambda a, b: ad.conv2d(a, b, 2, 1), _N(1, 2, 5, 5), _N(2, 2, 3, 3)),
    'grad_norm_l2': _binary(lambda a, b: ad.grad_norm({'a': a, 'b': b}, 2), _N(3, 2), _N(4)),
    'grad_norm_l1': _binary(lambda a, b: ad.grad_norm({'a': a, 'b': b}, 1),
                            lambda rng: _away(rng, (3, 2)), lambda rng: _away(rng, (4,))),
    'cross_entropy': _unary(lambda x: softmax_cross_entropy(x, [0, 2, 1, 2]), _N(4, 3)),
    'attention': lambda rng: (
        lambda v: scaled_dot_product_attention(v['q'], v['k'], v['v'], np.triu(np.full((3, 3), -1e9), 1)),
        {'q': rng.normal(0, 1, (1, 2, 3, 2)), 'k': rng.normal(0, 1, (1, 2, 3, 2)), 'v': rng.normal(0, 1, (1, 2, 3, 2))},
    ),
}


# Layer cases

def _split_inert(point):
    """Move key-projection biases out of the checked point into constant tensors"""
    constants = {k: Tensor(point.pop(k)) for k in [k for k in point if k.endswith(INERT_SUFFIX)]}
    return constants, point


def _layer(make, x_shape, ctx=None, extra=None, tokens=None):
    def build(rng):
        layer = make()
        constants, point = _split_inert({b.name: rng.normal(0.0, 0.5, b.shape) for b in layer.param_blocks()})
        if tokens is None:
            point['x'] = rng.normal(0.0, 1.0, x_shape)
        if extra:
            point.update({k: rng.normal(0.0, 1.0, shape) for k, (shape, _) in extra.items()})

        def fn(v):
            v = {**constants, **v}
            kwargs = {key: v[k] for k, (_, key) in (extra or {}).items()}
            x = tokens if tokens is not None else v['x']
            return layer(v, x, ctx, **kwargs)
        return fn, point
    return build


_TRAIN = Context('train')
_CAUSAL = np.triu(np.full((3, 3), -1e9), 1)

LAYERS = {
    'Dense': _layer(lambda: Dense('fc', 4, 3), (5, 4)),
    'Conv2d': _layer(lambda: Conv2d('conv', 2, 3, stride=2), (2, 2, 4, 4)),
    'BatchNorm': _layer(lambda: BatchNorm('bn', 3), (5, 3), _TRAIN),
    'BatchNorm_spatial': _layer(lambda: BatchNorm('bn', 3, spatial=True), (2, 3, 3, 3), _TRAIN),
    'LayerNorm': _layer(lambda: LayerNorm('ln', 4), (3, 4)),
    'Embedding': _layer(lambda: Embedding('embed', 6, 3), None, tokens=np.array([[0, 3, 3], [5, 1, 0]])),
    'MultiHeadAttention': _layer(lambda: MultiHeadAttention('attn', 4, 2), (2, 3, 4)),
    'MultiHeadAttention_cross': _layer(lambda: MultiHeadAttention('attn', 4, 2), (2, 3, 4),
                                       extra={'memory': ((2, 2, 4), 'memory')}),
    'FeedForward': _layer(lambda: FeedForward('ffn', 4, 6, 'gelu'), (2, 3, 4)),
}

# composite blocks are an order of magnitude slower per instance
BLOCKS = {
    'PostLNEncoderBlock': _layer(lambda: PostLNEncoderBlock('enc', 4, 2, 6, 'gelu'), (1, 3, 4)),
    'PostLNDecoderBlock': lambda rng: _decoder_case(rng),
}


def _decoder_case(rng):
    layer = PostLNDecoderBlock('dec', 4, 2, 6, 'gelu')
    constants, point = _split_inert({b.name: rng.normal(0.0, 0.5, b.shape) for b in layer.param_blocks()})
    point['x'] = rng.normal(0.0, 1.0, (1, 3, 4))
    point['memory'] = rng.normal(0.0, 1.0, (1, 2, 4))

    def fn(v):
        v = {**constants, **v}
        return layer(v, v['x'], memory=v['memory'], mask=_CAUSAL)
    return fn, point


def check_inert_key_bias(rng, instances=5):
    """Largest |autodiff gradient| of any key-projection bias in the attention layers and blocks"""
    builders = [
        lambda: (MultiHeadAttention('attn', 4, 2), lambda layer, v: layer(v, v['x'])),
        lambda: (MultiHeadAttention('attn', 4, 2), lambda layer, v: layer(v, v['x'], memory=v['memory'])),
        lambda: (PostLNEncoderBlock('enc', 4, 2, 6, 'gelu'), lambda layer, v: layer(v, v['x'])),
        lambda: (PostLNDecoderBlock('dec', 4, 2, 6, 'gelu'),
                 lambda layer, v: layer(v, v['x'], memory=v['memory'], mask=_CAUSAL)),
    ]
    worst = 0.0
    for make in builders:
        for _ in range(instances):
            layer, call = make()
            tape = Tape()
            v = {b.name: tape.variable(rng.normal(0.0, 0.5, b.shape)) for b in layer.param_blocks()}
            v['x'] = Tensor(rng.normal(0.0, 1.0, (2, 3, 4)))
            v['memory'] = Tensor(rng.normal(0.0, 1.0, (2, 2, 4)))
            out = call(layer, v)
            loss = ad.sum_(ad.mul(out, Tensor(_away(rng, out.shape, 0.5, 1.5))))
            names = [k for k in v if k.endswith(INERT_SUFFIX)]
            grads = tape.backward(loss, {k: v[k] for k in names})
            worst = max([worst] + [float(np.max(np.abs(grads[k].data))) for k in names])
    return worst


# Double backward through the scale vector

def double_backward_case(p):
    """||g||_p of a 3-layer GELU MLP as a function of per-block scales"""
    def build(rng):
        model = build_model(ArchSpec(kind='mlp', widths=[5, 8, 8, 3], activation='gelu'),
                            seed=int(rng.integers(2 ** 31)))
        batch = Batch(np.arange(8), rng.normal(0.0, 1.0, (8, 5)), rng.integers(0, 3, 8))
        weights = [Tensor(b.data.copy()) for b in model.blocks]

        def fn(v):
            alphas = v['alphas']
            tape = alphas.tape
            theta = {b.name: ad.mul(w, ad.slice_(alphas, (i,))) for i, (b, w) in enumerate(zip(model.blocks, weights))}
            loss = model.forward_loss(batch, 'train', theta)
            return ad.grad_norm(tape.backward(loss, theta, create_graph=True), p)
        return fn, {'alphas': rng.uniform(0.5, 1.5, len(model.blocks))}
    return build


def check_detach():
    """d/dx sum(detach(x) * x) must be detach(x), never 2x"""
    x = np.arange(1.0, 5.0)
    tape = Tape()
    v = tape.variable(x)
    g = tape.backward(ad.sum_(ad.mul(ad.detach(v), v)), [v])[0].data
    stopped = tape.backward(ad.sum_(ad.detach(v)), [v])[0].data
    return float(max(np.max(np.abs(g - x)), np.max(np.abs(stopped))))


def _small(report):
    low, high = SMALL_GRADIENT
    return any(np.any((np.abs(a) > low) & (np.abs(a) < high)) for a in report.analytic.values())


def check_case(name, kind, build, instances, rng, tol=TOLERANCE, project=True):
    """Worst relative error over ``instances`` random draws, redrawing ill-conditioned ones"""
    worst, redraws = 0.0, 0
    for _ in range(instances):
        for attempt in range(MAX_REDRAWS):
            fn, point = build(rng)
            f = _projected(fn, point, rng) if project else fn
            report = finite_diff_check(f, point, tol=tol)
            if not _small(report):
                break
            redraws += 1
        worst = max(worst, report.max_rel_err)
    if worst >= tol:
        logger.warning(f"gradcheck {name}: max relative error {worst:.3g} exceeds {tol:g}")
    return CaseResult(name, kind, instances, worst, tol, redraws)


def run_gradcheck(trials=100, seed=0, block_trials=None):
    """Check every primitive, layer and composite block, then double backward (p=1, 2) and detach"""
    rng = np.random.default_rng(seed)
    block_trials = block_trials or max(trials // 10, 1)
    plan = [(n, 'primitive', b, trials) for n, b in PRIMITIVES.items()]
    plan += [(n, 'layer', b, trials) for n, b in LAYERS.items()]
    plan += [(n, 'block', b, block_trials) for n, b in BLOCKS.items()]

    report = GradcheckReport()
    for name, kind, build, count in tqdm(plan, desc="Gradcheck", disable=not settings.SHOW_PROGRESS):
        report.cases.append(check_case(name, kind, build, count, rng))
    for p in (1, 2):
        report.cases.append(check_case(f"double_backward_l{p}", 'second-order', double_backward_case(p),
                                       max(trials // 10, 1), rng, SECOND_ORDER_TOLERANCE, project=False))
    report.cases.append(CaseResult('detach', 'primitive', 1, check_detach(), TOLERANCE))
    report.cases.append(CaseResult('key_bias_gradient_zero', 'block', 4 * block_trials,
                                   check_inert_key_bias(rng, block_trials), INERT_TOLERANCE))
    logger.info(f"Gradcheck: {len(report.cases) - len(report.failures)}/{len(report.cases)} cases passed")
    return report
