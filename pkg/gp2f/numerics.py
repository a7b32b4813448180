"""Numeric substrate: dense float64 matrices, a reverse-mode tape over a fixed
primitive set, Adam with decoupled weight decay, finite-difference checking and
named, seedable random streams.

Matrices are plain 2-D ``numpy.ndarray`` of dtype float64. Scalars travel as
1x1 matrices and column vectors as Nx1 matrices. A :class:`Tape` records every
primitive applied to its :class:`Node` objects; ``Tape.backward`` walks the
record in reverse and returns gradients for the named parameter leaves only.

Example
-------
>>> tape = Tape()
>>> w = tape.param('w', [[1., -1.], [2., 0.]])
>>> loss = masked_sum(relu(w))
>>> tape.backward(loss)['w']
array([[1., 0.],
       [1., 0.]])
"""
import zlib
import dataclasses

import numpy as np

from gp2f import logger
from gp2f.errors import ContractError, DimensionError, NumericError, ValidationError

DenseMatrix = np.ndarray

ROW_NORM_EPS = 1e-12


# RANDOM STREAMS
# ==============

def _stream_key(key):
    if isinstance(key, (int, np.integer)) and key >= 0:
        return int(key)
    return zlib.crc32(str(key).encode('utf-8'))


def make_rng(seed, *keys):
    """Independent PCG64 generator for the stream named by (seed, *keys).

    Streams with different keys are statistically independent, and a stream
    does not depend on how many other streams were drawn before it.
    """
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_stream_key(k) for k in keys))
    return np.random.Generator(np.random.PCG64(seq))


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def selection_matrix(index, n):
    """one-hot rows: selection_matrix(idx, n) @ X == X[idx]"""
    index = np.asarray(index, dtype=np.int64)
    sel = np.zeros((len(index), n))
    sel[np.arange(len(index)), index] = 1.0
    return sel


def as_matrix(x):
    a = np.array(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise DimensionError(f'expected a matrix, got {a.ndim}-d array')
    return a


def check_finite(value, op):
    if not np.all(np.isfinite(value)):
        raise NumericError(f'non-finite value produced by {op}')
    return value


def _frozen(a):
    a.flags.writeable = False
    return a


# TAPE
# ====

class Node:
    """A matrix value recorded on a tape."""
    __slots__ = ('tape', 'value', 'index', 'name', 'requires_grad')

    def __init__(self, tape, value, index, name=None, requires_grad=False):
        self.tape = tape
        self.value = value
        self.index = index
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __float__(self):
        if self.value.size != 1:
            raise DimensionError(f'cannot convert {self.shape} matrix to float')
        return float(self.value.reshape(()))

    def __array__(self, dtype=None, copy=None):
        return self.value if dtype is None else self.value.astype(dtype)

    def __repr__(self):
        label = self.name or f'#{self.index}'
        return f'Node({label}, shape={self.shape})'

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclasses.dataclass
class _Record:
    op: str
    node: Node
    inputs: tuple
    forward: object
    vjp: object


class Tape:
    """Ordered record of primitive applications.

    Single owner: build one tape per forward pass. Values stored on the tape
    are read-only so the record doubles as a snapshot for :meth:`replay`.
    """

    def __init__(self):
        self.records = []
        self.params = {}
        self._count = 0

    def _new(self, value, name=None, requires_grad=False):
        node = Node(self, _frozen(value), self._count, name=name, requires_grad=requires_grad)
        self._count += 1
        return node

    def param(self, name, value):
        if name in self.params:
            raise ContractError(f'duplicate parameter name: {name}')
        node = self._new(check_finite(as_matrix(value), f'param {name}'), name=name, requires_grad=True)
        self.params[name] = node
        return node

    def constant(self, value, name=None):
        if isinstance(value, Node):
            return value
        return self._new(check_finite(as_matrix(value), f'constant {name or ""}'.strip()), name=name)

    def record(self, op, inputs, forward, vjp):
        out = forward(*[n.value for n in inputs])
        check_finite(out, op)
        node = self._new(out, requires_grad=any(n.requires_grad for n in inputs))
        self.records.append(_Record(op, node, tuple(inputs), forward, vjp))
        return node

    def backward(self, output):
        """Gradient of the scalar `output` for every parameter leaf, by name.

        Each recorded node is visited at most once, in reverse creation
        (topological) order.
        """
        if output.tape is not self:
            raise ContractError('output does not belong to this tape')
        if output.value.size != 1:
            raise DimensionError(f'backward needs a scalar output, got {output.shape}')
        grads = {output.index: np.ones_like(output.value)}
        for rec in reversed(self.records):
            if rec.node.index > output.index:
                continue
            g = grads.pop(rec.node.index, None)
            if g is None or not rec.node.requires_grad:
                continue
            parent_grads = rec.vjp(g, *[n.value for n in rec.inputs], rec.node.value)
            for parent, pg in zip(rec.inputs, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                check_finite(pg, f'{rec.op} (backward)')
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        return {name: grads.get(node.index, np.zeros_like(node.value))
                for name, node in self.params.items()}

    def replay(self):
        """Re-run every record from its stored inputs; True iff all outputs match bit-for-bit."""
        for rec in self.records:
            out = rec.forward(*[n.value for n in rec.inputs])
            if out.shape != rec.node.shape or out.tobytes() != rec.node.value.tobytes():
                logger.debug(f'replay mismatch at {rec.op} #{rec.node.index}')
                return False
        return True


def _lift(*xs):
    # the tape of a gradient-carrying operand wins; other nodes are lifted onto it
    tape = next((x.tape for x in xs if isinstance(x, Node) and x.requires_grad), None)
    if tape is None:
        tape = next((x.tape for x in xs if isinstance(x, Node)), None)
    if tape is None:
        tape = Tape()
    nodes = []
    for x in xs:
        if isinstance(x, Node):
            if x.tape is tape:
                nodes.append(x)
                continue
            # a value from another tape enters as a constant, unless it carries gradients
            if x.requires_grad:
                raise ContractError('operands belong to different tapes')
            nodes.append(tape.constant(x.value))
        else:
            nodes.append(tape.constant(x))
    return tape, nodes


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _logistic(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# PRIMITIVES
# ==========

def matmul(a, b):
    tape, (a, b) = _lift(a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f'matmul: {a.shape} @ {b.shape}')
    return tape.record('matmul', (a, b), np.matmul,
                       lambda g, x, y, out: (g @ y.T, x.T @ g))


def transpose_product(a, b):
    """a @ b.T"""
    tape, (a, b) = _lift(a, b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f'transpose_product: {a.shape} @ {b.shape}.T')
    return tape.record('transpose_product', (a, b), lambda x, y: x @ y.T,
                       lambda g, x, y, out: (g @ y, g.T @ x))


def add(a, b):
    tape, (a, b) = _lift(a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f'add: {a.shape} + {b.shape}')
    return tape.record('add', (a, b), np.add,
                       lambda g, x, y, out: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def scale(x, s):
    """x * s for a python number, a 1x1 node or a broadcastable matrix s"""
    if isinstance(s, (int, float, np.floating)):
        s = float(s)
        tape, (x,) = _lift(x)
        return tape.record('scale', (x,), lambda v: v * s, lambda g, v, out: (g * s,))
    tape, (x, s) = _lift(x, s)
    try:
        np.broadcast_shapes(x.shape, s.shape)
    except ValueError:
        raise DimensionError(f'scale: {x.shape} * {s.shape}')
    return tape.record('scale', (x, s), np.multiply,
                       lambda g, v, w, out: (_unbroadcast(g * w, v.shape), _unbroadcast(g * v, w.shape)))


def relu(x):
    # relu'(0) := 0
    tape, (x,) = _lift(x)
    return tape.record('relu', (x,), lambda v: np.maximum(v, 0.0),
                       lambda g, v, out: (g * (v > 0),))


def sigmoid(x):
    tape, (x,) = _lift(x)
    return tape.record('sigmoid', (x,), _logistic,
                       lambda g, v, out: (g * out * (1.0 - out),))


def exp(x):
    tape, (x,) = _lift(x)
    def forward(v):
        with np.errstate(over='ignore'):
            return np.exp(v)
    return tape.record('exp', (x,), forward, lambda g, v, out: (g * out,))


def log(x):
    tape, (x,) = _lift(x)
    def forward(v):
        with np.errstate(divide='ignore', invalid='ignore'):
            return np.log(v)
    return tape.record('log', (x,), forward, lambda g, v, out: (g / v,))


def log_sigmoid(x):
    """log(logistic(x)) evaluated in logit space"""
    tape, (x,) = _lift(x)
    return tape.record('log_sigmoid', (x,), lambda v: -np.logaddexp(0.0, -v),
                       lambda g, v, out: (g * _logistic(-v),))


def row_normalize(x, eps=ROW_NORM_EPS):
    """rows divided by max(||row||, eps); zero rows stay zero"""
    tape, (x,) = _lift(x)
    def forward(v):
        norm = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
        return v / np.maximum(norm, eps)
    def vjp(g, v, out):
        norm = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
        d = np.maximum(norm, eps)
        proj = np.sum(g * out, axis=1, keepdims=True) * (norm > eps)
        return ((g - out * proj) / d,)
    return tape.record('row_normalize', (x,), forward, vjp)


def masked_sum(x, mask=None, axis=None):
    """sum of x * mask, over everything (1x1), rows (axis=1, Nx1) or columns (axis=0, 1xM)"""
    tape, (x,) = _lift(x)
    m = None if mask is None else np.asarray(mask, dtype=np.float64)
    if m is not None:
        try:
            np.broadcast_shapes(x.shape, m.shape)
        except ValueError:
            raise DimensionError(f'masked_sum: mask {m.shape} vs {x.shape}')
    def forward(v):
        w = v if m is None else v * m
        if axis is None:
            return np.sum(w).reshape(1, 1)
        return np.sum(w, axis=axis, keepdims=True)
    def vjp(g, v, out):
        full = np.broadcast_to(g, v.shape)
        return ((full if m is None else full * m).copy(),)
    return tape.record('masked_sum', (x,), forward, vjp)


def softmax_cross_entropy(logits, labels):
    """mean softmax cross-entropy of logits (n x C) against integer labels"""
    tape, (logits,) = _lift(logits)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, C = logits.shape
    if len(labels) != n:
        raise DimensionError(f'softmax_cross_entropy: {n} rows for {len(labels)} labels')
    if n == 0:
        raise DimensionError('softmax_cross_entropy: no rows')
    if labels.min() < 0 or labels.max() >= C:
        raise ValidationError(f'label out of range [0, {C})')
    rows = np.arange(n)
    def forward(z):
        shifted = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.sum(np.exp(shifted), axis=1))
        return np.mean(lse - shifted[rows, labels]).reshape(1, 1)
    def vjp(g, z, out):
        shifted = z - z.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[rows, labels] -= 1.0
        return (p * (float(g.reshape(())) / n),)
    return tape.record('softmax_cross_entropy', (logits,), forward, vjp)


# composites

def sub(a, b):
    return add(a, scale(b, -1.0))


def mean(x):
    return scale(masked_sum(x), 1.0 / x.value.size if isinstance(x, Node) else 1.0 / np.size(x))


# PROGRAMS
# ========

def _values(out):
    if isinstance(out, Node):
        return out.value
    if isinstance(out, tuple):
        return tuple(_values(o) for o in out)
    if isinstance(out, dict):
        return {k: _values(o) for k, o in out.items()}
    return out


def _root(out):
    return out[0] if isinstance(out, tuple) else out


def forward_and_grad(program, params):
    """Run `program(leaves)` on a fresh tape and differentiate its scalar output.

    `program` receives a dict of named parameter nodes and returns a scalar
    node, or a tuple whose first item is the scalar node. Returns the
    program's outputs (as arrays) and the gradient of each named parameter.
    """
    tape = Tape()
    leaves = {name: tape.param(name, value) for name, value in params.items()}
    out = program(leaves)
    grads = tape.backward(_root(out))
    return _values(out), grads


def evaluate(program, params):
    """scalar output of `program` without building gradients"""
    tape = Tape()
    leaves = {name: tape.constant(value, name=name) for name, value in params.items()}
    return float(_root(program(leaves)))


def finite_diff_check(program, params, h=1e-5, kink_shift=1e-3):
    """Largest relative error between tape gradients and central differences.

    Per parameter tensor the error is max|analytic - central| divided by
    max(1e-8, max|central|); the maximum over tensors is returned. Entries
    that are exactly zero are shifted by `kink_shift` first so that no relu
    sits on its kink.
    """
    params = {name: as_matrix(value) for name, value in params.items()}
    for value in params.values():
        value[value == 0.0] += kink_shift
    _, grads = forward_and_grad(program, params)
    worst = 0.0
    for name, value in params.items():
        central = np.zeros_like(value)
        for i in range(value.size):
            orig = value.flat[i]
            value.flat[i] = orig + h
            f_plus = evaluate(program, params)
            value.flat[i] = orig - h
            f_minus = evaluate(program, params)
            value.flat[i] = orig
            central.flat[i] = (f_plus - f_minus) / (2 * h)
        err = np.max(np.abs(grads[name] - central)) / max(1e-8, np.max(np.abs(central)))
        logger.debug(f'finite difference {name}: {err:.3e}')
        worst = max(worst, float(err))
    return worst


# OPTIMIZER
# =========

@dataclasses.dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = dataclasses.field(default_factory=dict)
    v: dict = dataclasses.field(default_factory=dict)


def adam_step(params, grads, state):
    """One Adam step with bias correction and decoupled weight decay.

    Weight decay is applied first as p <- p - lr * weight_decay * p. Missing
    gradients count as zero. Returns new parameter arrays and a new state;
    inputs are not modified.
    """
    t = state.t + 1
    lr, wd, b1, b2 = state.lr, state.weight_decay, state.beta1, state.beta2
    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise DimensionError(f'adam: gradient {g.shape} for parameter {name} {p.shape}')
        if wd:
            p = p - lr * wd * p
        m[name] = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v[name] = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1 ** t)
        v_hat = v[name] / (1 - b2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, dataclasses.replace(state, t=t, m=m, v=v)


class Adam:
    """Adam over named parameter groups, each with its own lr and weight decay.

    >>> opt = Adam({'up': (['w'], 0.1, 0.0)})
    >>> opt.step({'w': np.ones((1, 1))}, {'w': np.ones((1, 1))})['w'].round(6)
    array([[0.9]])
    """

    def __init__(self, groups):
        self.groups = {}
        for group, (names, lr, weight_decay) in groups.items():
            self.groups[group] = (tuple(names), AdamState(lr=lr, weight_decay=weight_decay))

    def step(self, params, grads):
        params = dict(params)
        for group, (names, state) in self.groups.items():
            sub_params = {n: params[n] for n in names if n in params}
            updated, state = adam_step(sub_params, grads, state)
            params.update(updated)
            self.groups[group] = (names, state)
        return params
