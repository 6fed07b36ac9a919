"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every primitive records a node holding its inputs and a vector-Jacobian
closure. The closures are written with the same Tensor operations as the
forward pass, so running backward with ``create_graph=True`` records the
adjoint computation on the tape and the resulting gradients can be
differentiated again.
"""
from contextlib import contextmanager
from dataclasses import dataclass, field
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config.settings import settings
from src.errors import AutodiffError, ShapeError


def default_dtype():
    return np.dtype(settings.DTYPE)


class Tensor:
    """Dense value, optionally bound to a tape node."""

    __array_priority__ = 100

    def __init__(self, data, tape=None, node=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def requires_grad(self):
        return self.node is not None

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def __float__(self):
        return self.item()

    def __repr__(self):
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Node:
    __slots__ = ('op', 'inputs', 'vjp', 'out')

    def __init__(self, op, inputs, vjp, out=None):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.out = out


class GradMap(dict):
    """Parameter name -> gradient Tensor."""

    def detach(self):
        return GradMap((k, detach(v)) for k, v in self.items())

    def flat(self):
        return np.concatenate([v.data.ravel() for v in self.values()]) if self else np.zeros(0)

    def norm(self, p=2):
        return grad_norm(self, p)


class Tape:
    """Append-only record of primitive applications.

    Nodes are indexed by position and only ever reference earlier nodes, so
    the list is already in topological order. ``generation`` counts the
    backward passes that recorded their own adjoint graph (second order).
    """

    def __init__(self):
        self.nodes = []
        self.generation = 0
        self.recording = True

    def __len__(self):
        return len(self.nodes)

    def variable(self, value):
        """Register a leaf tensor that gradients can be taken with respect to"""
        out = Tensor(value.data if isinstance(value, Tensor) else value, tape=self, node=len(self.nodes))
        self.nodes.append(Node('leaf', (), None, None))
        return out

    def record(self, op, data, inputs, vjp):
        out = Tensor(data, tape=self, node=len(self.nodes))
        self.nodes.append(Node(op, inputs, vjp, out))
        return out

    @contextmanager
    def recording_as(self, flag):
        previous = self.recording
        self.recording = flag
        try:
            yield self
        finally:
            self.recording = previous

    def backward(self, output, wrt, create_graph=False):
        """Reverse-mode gradients of a scalar output.

        ``wrt`` is a mapping name -> Tensor or a sequence of Tensors (named by
        position). With ``create_graph`` the returned gradients carry tape
        nodes and can be differentiated again.
        """
        if output.node is not None and output.tape is not self:
            raise AutodiffError("backward output is recorded on another tape")
        if output.data.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")

        if isinstance(wrt, dict):
            names, targets = list(wrt.keys()), list(wrt.values())
        else:
            targets = list(wrt)
            names = list(range(len(targets)))
        for name, target in zip(names, targets):
            if not isinstance(target, Tensor) or target.tape is not self or target.node is None:
                raise AutodiffError(f"{name!r} is not on the tape")

        # a constant output (e.g. fully detached) has zero gradient everywhere
        if output.node is None:
            return GradMap((name, Tensor(np.zeros_like(t.data))) for name, t in zip(names, targets))

        if create_graph:
            self.generation += 1

        adjoint = {output.node: Tensor(np.ones_like(output.data))}
        lowest = min([t.node for t in targets] + [output.node])
        with self.recording_as(create_graph):
            for index in range(output.node, lowest - 1, -1):
                upstream = adjoint.get(index)
                node = self.nodes[index]
                if upstream is None or node.vjp is None:
                    continue
                needs = tuple(inp.node is not None for inp in node.inputs)
                grads = node.vjp(upstream, node.out, needs)
                for inp, grad in zip(node.inputs, grads):
                    if grad is None or inp.node is None:
                        continue
                    if inp.node in adjoint:
                        adjoint[inp.node] = add(adjoint[inp.node], grad)
                    else:
                        adjoint[inp.node] = grad

        result = GradMap()
        for name, target in zip(names, targets):
            grad = adjoint.get(target.node)
            if grad is None:
                grad = Tensor(np.zeros_like(target.data))
            elif grad.shape != target.shape:
                raise ShapeError(f"gradient for {name!r} has shape {grad.shape}, expected {target.shape}")
            result[name] = grad
        return result


def backward(tape, output, wrt, create_graph=False):
    return tape.backward(output, wrt, create_graph=create_graph)


def detach(t):
    """Same values, no tape node: downstream gradients stop here"""
    return Tensor(t.data)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(inputs):
    tape = None
    for t in inputs:
        if t.node is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise AutodiffError("operands are recorded on different tapes")
    return tape


def _make(op, data, inputs, vjp):
    tape = _tape_of(inputs)
    if tape is None or not tape.recording:
        return Tensor(data)
    return tape.record(op, data, inputs, vjp)


def _unbroadcast(g, shape):
    shape = tuple(shape)
    if g.shape == shape:
        return g
    return sum_to(g, shape)


# Shape plumbing

def sum_to(x, shape):
    """Sum x down to a broadcast-compatible shape"""
    x = _lift(x)
    shape = tuple(shape)
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"cannot sum shape {x.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True) if axes else x.data
    data = data.reshape(shape)
    return _make('sum_to', data, (x,), lambda g, out, needs: (broadcast_to(g, x.shape),))


def broadcast_to(x, shape):
    x = _lift(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    data = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return _make('broadcast', data, (x,), lambda g, out, needs: (sum_to(g, x.shape),))


def reshape(x, shape):
    x = _lift(x)
    data = x.data.reshape(shape)
    return _make('reshape', data, (x,), lambda g, out, needs: (reshape(g, x.shape),))


def transpose(x, axes=None):
    x = _lift(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make('transpose', x.data.transpose(axes), (x,), lambda g, out, needs: (transpose(g, inverse),))


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def slice_(x, index):
    """Basic (slice/int) indexing"""
    x = _lift(x)
    if not isinstance(index, tuple):
        index = (index,)
    data = np.array(x.data[index])
    return _make('slice', data, (x,), lambda g, out, needs: (embed(g, x.shape, index),))


def embed(x, shape, index):
    """Zero tensor of ``shape`` with x written at ``index``; adjoint of slice_"""
    x = _lift(x)
    data = np.zeros(shape, dtype=x.data.dtype)
    data[index] = x.data
    return _make('embed', data, (x,), lambda g, out, needs: (slice_(g, index),))


def concat(xs, axis=0):
    xs = [_lift(x) for x in xs]
    axis = axis % xs[0].ndim
    data = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def vjp(g, out, needs):
        grads = []
        for k, need in enumerate(needs):
            if not need:
                grads.append(None)
                continue
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(bounds[k]), int(bounds[k + 1]))
            grads.append(slice_(g, tuple(index)))
        return tuple(grads)

    return _make('concat', data, tuple(xs), vjp)


# Elementwise arithmetic

def add(a, b):
    a, b = _lift(a), _lift(b)

    def vjp(g, out, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _make('add', a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = _lift(a), _lift(b)

    def vjp(g, out, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(scalar_mul(g, -1.0), b.shape) if needs[1] else None)

    return _make('sub', a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = _lift(a), _lift(b)

    def vjp(g, out, needs):
        return (_unbroadcast(mul(g, b), a.shape) if needs[0] else None,
                _unbroadcast(mul(g, a), b.shape) if needs[1] else None)

    return _make('mul', a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = _lift(a), _lift(b)

    def vjp(g, out, needs):
        ga = _unbroadcast(div(g, b), a.shape) if needs[0] else None
        gb = _unbroadcast(scalar_mul(div(mul(g, out), b), -1.0), b.shape) if needs[1] else None
        return ga, gb

    return _make('div', a.data / b.data, (a, b), vjp)


def scalar_mul(x, c):
    x = _lift(x)
    c = float(c)
    return _make('scalar_mul', x.data * c, (x,), lambda g, out, needs: (scalar_mul(g, c),))


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def vjp(g, out, needs):
        ga = _unbroadcast(matmul(g, swap_last(b)), a.shape) if needs[0] else None
        gb = _unbroadcast(matmul(swap_last(a), g), b.shape) if needs[1] else None
        return ga, gb

    return _make('matmul', np.matmul(a.data, b.data), (a, b), vjp)


# Unary functions

def relu(x):
    x = _lift(x)
    mask = (x.data > 0).astype(x.data.dtype)
    return _make('relu', x.data * mask, (x,), lambda g, out, needs: (mul(g, Tensor(mask)),))


def tanh(x):
    x = _lift(x)
    return _make('tanh', np.tanh(x.data), (x,),
                 lambda g, out, needs: (mul(g, sub(1.0, mul(out, out))),))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(x):
    """tanh-approximated GELU"""
    x = _lift(x)
    u = _GELU_C * (x.data + _GELU_K * x.data ** 3)
    data = 0.5 * x.data * (1.0 + np.tanh(u))

    def vjp(g, out, needs):
        t = tanh(scalar_mul(add(x, scalar_mul(power(x, 3), _GELU_K)), _GELU_C))
        du = scalar_mul(add(1.0, scalar_mul(power(x, 2), 3 * _GELU_K)), _GELU_C)
        local = add(scalar_mul(add(1.0, t), 0.5),
                    mul(scalar_mul(x, 0.5), mul(sub(1.0, mul(t, t)), du)))
        return (mul(g, local),)

    return _make('gelu', data, (x,), vjp)


def exp(x):
    x = _lift(x)
    return _make('exp', np.exp(x.data), (x,), lambda g, out, needs: (mul(g, out),))


def log(x):
    x = _lift(x)
    return _make('log', np.log(x.data), (x,), lambda g, out, needs: (div(g, x),))


def sqrt(x):
    x = _lift(x)
    return _make('sqrt', np.sqrt(x.data), (x,), lambda g, out, needs: (div(g, scalar_mul(out, 2.0)),))


def _safe_sqrt(x):
    """sqrt of a scalar whose adjoint is 0 at 0 (subgradient of a norm at the origin)"""
    x = _lift(x)

    def vjp(g, out, needs):
        if float(out.data) == 0.0:
            return (None,)
        return (div(g, scalar_mul(out, 2.0)),)

    return _make('sqrt', np.sqrt(x.data), (x,), vjp)


def power(x, p):
    x = _lift(x)
    p = float(p)

    def vjp(g, out, needs):
        if p == 0.0:
            return (None,)
        if p == 1.0:
            return (g,)
        return (mul(g, scalar_mul(power(x, p - 1.0), p)),)

    return _make('power', x.data ** p, (x,), vjp)


def abs_(x):
    x = _lift(x)
    sgn = np.sign(x.data)
    return _make('abs', np.abs(x.data), (x,), lambda g, out, needs: (mul(g, Tensor(sgn)),))


def sign(x):
    """sign(0) = 0; the adjoint is zero everywhere"""
    x = _lift(x)
    return _make('sign', np.sign(x.data), (x,), lambda g, out, needs: (None,))


# Reductions

def _keep_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = {a % len(shape) for a in (axis if isinstance(axis, tuple) else (axis,))}
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def sum_(x, axis=None, keepdims=False):
    x = _lift(x)
    kept = _keep_shape(x.shape, axis)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    return _make('sum', data, (x,),
                 lambda g, out, needs: (broadcast_to(reshape(g, kept), x.shape),))


def mean(x, axis=None, keepdims=False):
    x = _lift(x)
    total = sum_(x, axis, keepdims)
    count = x.size // max(int(np.prod(_keep_shape(x.shape, axis))), 1)
    return scalar_mul(total, 1.0 / count)


def var(x, axis=None, keepdims=False):
    """Biased (1/n) variance"""
    x = _lift(x)
    centered = sub(x, mean(x, axis, keepdims=True))
    return mean(mul(centered, centered), axis, keepdims)


def max_(x, axis=None, keepdims=False):
    """Maximum; ties share the adjoint equally"""
    x = _lift(x)
    kept_data = x.data.max(axis=axis, keepdims=True)
    mask = (x.data == kept_data).astype(x.data.dtype)
    mask /= mask.sum(axis=axis, keepdims=True)
    data = kept_data if keepdims else kept_data.reshape(np.max(x.data, axis=axis).shape)
    kept = kept_data.shape
    return _make('max', data, (x,),
                 lambda g, out, needs: (mul(broadcast_to(reshape(g, kept), x.shape), Tensor(mask)),))


def softmax(x, axis=-1):
    x = _lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, out, needs):
        inner = sum_(mul(g, out), axis=axis, keepdims=True)
        return (mul(out, sub(g, inner)),)

    return _make('softmax', data, (x,), vjp)


def log_softmax(x, axis=-1):
    x = _lift(x)
    shifted = sub(x, Tensor(x.data.max(axis=axis, keepdims=True)))
    return sub(shifted, log(sum_(exp(shifted), axis=axis, keepdims=True)))


# Indexing

def gather(table, indices):
    """Row lookup table[indices] (embedding)"""
    table = _lift(table)
    indices = np.asarray(indices, dtype=np.int64)
    return _make('gather', table.data[indices], (table,),
                 lambda g, out, needs: (scatter_add(g, indices, table.shape),))


def scatter_add(x, indices, shape):
    """Adjoint of gather: rows of x added into a zero table"""
    x = _lift(x)
    data = np.zeros(shape, dtype=x.data.dtype)
    np.add.at(data, indices, x.data)
    return _make('scatter_add', data, (x,), lambda g, out, needs: (gather(g, indices),))


# Convolution

def unfold2d(x, kh, kw, stride):
    """(N, C, H, W) -> (N, C*kh*kw, Ho*Wo) patch matrix"""
    x = _lift(x)
    n, c, h, w = x.shape
    windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    data = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return _make('unfold2d', data, (x,), lambda g, out, needs: (fold2d(g, x.shape, kh, kw, stride),))


def fold2d(cols, shape, kh, kw, stride):
    """Scatter-add a patch matrix back onto an (N, C, H, W) grid; adjoint of unfold2d"""
    cols = _lift(cols)
    n, c, h, w = shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    patches = cols.data.reshape(n, c, kh, kw, ho, wo)
    data = np.zeros(shape, dtype=cols.data.dtype)
    for i in range(kh):
        for j in range(kw):
            data[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += patches[:, :, i, j]
    return _make('fold2d', data, (cols,), lambda g, out, needs: (unfold2d(g, kh, kw, stride),))


def conv2d(x, w, stride=1, padding=1):
    """Cross-correlation of x (N, C, H, W) with kernels w (O, C, kh, kw)"""
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if padding:
        padded = (n, c, h + 2 * padding, wd + 2 * padding)
        x = embed(x, padded, (slice(None), slice(None), slice(padding, padding + h), slice(padding, padding + wd)))
    ho = (x.shape[2] - kh) // stride + 1
    wo = (x.shape[3] - kw) // stride + 1
    cols = unfold2d(x, kh, kw, stride)
    out = matmul(reshape(w, (o, c * kh * kw)), cols)
    return reshape(out, (n, o, ho, wo))


# Norms and verification

def grad_norm(g, p=2):
    """l_p norm (p in {1, 2}) over the concatenation of all GradMap entries"""
    if p not in (1, 2):
        raise AutodiffError(f"grad_norm order must be 1 or 2, got {p}")
    entries = list(g.values()) if isinstance(g, dict) else list(g)
    if not entries:
        raise AutodiffError("grad_norm of an empty gradient")
    if p == 1:
        terms = [sum_(abs_(e)) for e in entries]
    else:
        terms = [sum_(mul(e, e)) for e in entries]
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return total if p == 1 else _safe_sqrt(total)


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    passed: bool
    worst: tuple = None
    checked: int = 0
    analytic: dict = field(default_factory=dict, repr=False)


def _evaluate(f, point):
    tape = Tape()
    return float(f({k: tape.variable(v) for k, v in point.items()}).item())


def finite_diff_check(f, point, h=1e-5, tol=1e-6):
    """Compare backward against central differences coordinate by coordinate.

    ``f`` maps a dict name -> Tensor (tape variables) to a scalar Tensor. The
    relative error uses max(|analytic|, |numeric|, 1e-12) as denominator.
    """
    if h <= 0:
        raise AutodiffError("finite difference step must be positive")
    point = {k: np.array(v, dtype=default_dtype()) for k, v in point.items()}
    tape = Tape()
    variables = {k: tape.variable(v) for k, v in point.items()}
    grads = tape.backward(f(variables), variables)

    max_err, worst, checked = 0.0, None, 0
    for name, value in point.items():
        for index in np.ndindex(value.shape):
            original = value[index]
            value[index] = original + h
            f_plus = _evaluate(f, point)
            value[index] = original - h
            f_minus = _evaluate(f, point)
            value[index] = original
            numeric = (f_plus - f_minus) / (2 * h)
            analytic = float(grads[name].data[index])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
            checked += 1
            if err > max_err:
                max_err, worst = err, (name, index)
    return FiniteDiffReport(max_err, max_err < tol, worst, checked,
                            {k: v.data.copy() for k, v in grads.items()})
