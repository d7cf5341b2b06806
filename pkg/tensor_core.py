"""
tensor_core.py
Dense float64 tensors, a reverse-mode tape, the seeded generator and the
finite-difference gradient checker everything else is built on.
"""
import logging
import math
import struct
import threading
from contextlib import contextmanager

import numpy as np

import config
from exceptions import FormatError, LabelError, NonFiniteError, ShapeError, TapeError

MASK64 = (1 << 64) - 1
TENSOR_MAGIC = b'IBAT'
TENSOR_VERSION = 1

_debug = {'check_finite': config.CHECK_FINITE}
_local = threading.local()


def set_debug(check_finite=True):
    """Toggle the non-finite check that runs after every op."""
    previous = _debug['check_finite']
    _debug['check_finite'] = bool(check_finite)
    return previous


class Tensor:
    """Immutable row-major float64 array, optionally tracked by the active tape."""

    __slots__ = ('data', 'requires_grad', 'name', 'node', '__weakref__')

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise ShapeError("tensor dimensions must be positive", arr.shape)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor", self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("tensors can only be divided by python scalars")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class TapeNode:
    __slots__ = ('op', 'inputs', 'saved', 'out', 'index', 'tape')

    def __init__(self, op, inputs, saved, out, index, tape):
        self.op = op
        self.inputs = inputs
        self.saved = saved
        self.out = out
        self.index = index
        self.tape = tape


class Tape:
    """Records every traced op in creation order. One tape per training step."""

    def __init__(self):
        self.nodes = []

    def record(self, op, inputs, saved, out):
        node = TapeNode(op, inputs, saved, out, len(self.nodes), self)
        self.nodes.append(node)
        return node

    def __len__(self):
        return len(self.nodes)


@contextmanager
def trace():
    stack = getattr(_local, 'tapes', None)
    if stack is None:
        stack = _local.tapes = []
    tape = Tape()
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


def _active_tape():
    stack = getattr(_local, 'tapes', None)
    return stack[-1] if stack else None


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data, op, inputs, saved=None):
    if _debug['check_finite'] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64, order='C')
    data.setflags(write=False)
    out.data = data
    out.name = None
    out.node = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = tape.record(op, tuple(inputs), saved, out)
    return out


def _broadcast_shape(a, b, what):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{what}: shapes do not broadcast", a.shape, b.shape) from None


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap_last(arr):
    return np.swapaxes(arr, -1, -2)


# ---------------------------------------------------------------- ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'add')
    return _make(a.data + b.data, 'add', (a, b))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'sub')
    return _make(a.data - b.data, 'sub', (a, b))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'mul')
    return _make(a.data * b.data, 'mul', (a, b))


def scale(a, factor):
    factor = float(factor)
    return _make(a.data * factor, 'scale', (a,), factor)


def sum(a, axis=None, keepdims=False):
    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), 'sum', (a,), (axis, keepdims))


def mean(a, axis=None, keepdims=False):
    count = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError("reshape changes the element count", a.shape, shape)
    return _make(a.data.reshape(shape), 'reshape', (a,))


def permute(a, axes):
    axes = tuple(axes)
    return _make(np.transpose(a.data, axes), 'permute', (a,), axes)


def transpose_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes", *[t.shape for t in tensors]) from None
    return _make(data, 'concat', tuple(tensors), (axis, sizes))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul: inner dimensions do not match", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul: batch dimensions do not broadcast", a.shape, b.shape) from None
    return _make(np.matmul(a.data, b.data), 'matmul', (a, b))


def linear(x, w, b):
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("linear: input width does not match weight", x.shape, w.shape)
    if b.shape != (w.shape[1],):
        raise ShapeError("linear: bias does not match weight", b.shape, w.shape)
    return _make(np.matmul(x.data, w.data) + b.data, 'linear', (x, w, b))


def softmax_lastdim(x):
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)
    return _make(y, 'softmax', (x,), y)


def layer_norm(x, gamma, beta, eps=config.LAYER_NORM_EPS):
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError("layer_norm: affine parameters do not match width", x.shape, gamma.shape)
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.mean((x.data - mu) ** 2, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    return _make(xhat * gamma.data + beta.data, 'layer_norm', (x, gamma, beta), (xhat, inv_std))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh approximation of GELU."""
    inner = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)
    return _make(0.5 * x.data * (1.0 + t), 'gelu', (x,), t)


def cross_entropy(logits, labels, axis=-1):
    """Mean negative log-likelihood; `axis` is the class axis of `logits`."""
    labels = np.asarray(labels)
    moved = np.moveaxis(logits.data, axis, -1)
    if moved.shape[:-1] != labels.shape:
        raise ShapeError("cross_entropy: labels do not match logits", logits.shape, labels.shape)
    classes = moved.shape[-1]
    flat = moved.reshape(-1, classes)
    idx = labels.reshape(-1).astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= classes):
        raise LabelError(f"label ids must lie in [0, {classes}), got range [{idx.min()}, {idx.max()}]")
    shifted = flat - np.max(flat, axis=-1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    log_p = shifted - log_z
    loss = -np.mean(log_p[np.arange(idx.size), idx])
    return _make(np.array(loss), 'cross_entropy', (logits,), (np.exp(log_p), idx, axis, moved.shape))


def unfold(x, kernel, stride, padding):
    """Overlapping patches of an image batch: [B,C,H,W] -> [B, Ho*Wo, C*k*k]."""
    if x.ndim != 4:
        raise ShapeError("unfold expects [B,C,H,W]", x.shape)
    b, c, h, w = x.shape
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kernel * kernel)
    return _make(cols, 'unfold', (x,), (kernel, stride, padding, ho, wo))


# ------------------------------------------------------------ backward rules

def _grad_add(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _grad_sub(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _grad_mul(node, g):
    a, b = node.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def _grad_scale(node, g):
    return (g * node.saved,)


def _grad_sum(node, g):
    (a,) = node.inputs
    axis, keepdims = node.saved
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape),)


def _grad_reshape(node, g):
    return (g.reshape(node.inputs[0].shape),)


def _grad_permute(node, g):
    return (np.transpose(g, np.argsort(node.saved)),)


def _grad_concat(node, g):
    axis, sizes = node.saved
    bounds = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _grad_matmul(node, g):
    a, b = node.inputs
    ga = np.matmul(g, _swap_last(b.data))
    gb = np.matmul(_swap_last(a.data), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _grad_linear(node, g):
    x, w, b = node.inputs
    gx = np.matmul(g, w.data.T)
    g2 = g.reshape(-1, w.shape[1])
    gw = np.matmul(x.data.reshape(-1, w.shape[0]).T, g2)
    gb = g2.sum(axis=0)
    return gx, gw, gb


def _grad_softmax(node, g):
    y = node.saved
    return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)


def _grad_layer_norm(node, g):
    x, gamma, beta = node.inputs
    xhat, inv_std = node.saved
    gxhat = g * gamma.data
    gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    width = x.shape[-1]
    ggamma = (g * xhat).reshape(-1, width).sum(axis=0)
    gbeta = g.reshape(-1, width).sum(axis=0)
    return gx, ggamma, gbeta


def _grad_gelu(node, g):
    (x,) = node.inputs
    t = node.saved
    d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
    return (g * d,)


def _grad_cross_entropy(node, g):
    probs, idx, axis, moved_shape = node.saved
    grad = probs.copy()
    grad[np.arange(idx.size), idx] -= 1.0
    grad *= float(g) / idx.size
    return (np.moveaxis(grad.reshape(moved_shape), -1, axis),)


def _grad_unfold(node, g):
    (x,) = node.inputs
    kernel, stride, padding, ho, wo = node.saved
    b, c, h, w = x.shape
    g = g.reshape(b, ho, wo, c, kernel, kernel)
    padded = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    for ki in range(kernel):
        for kj in range(kernel):
            padded[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                g[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return (padded[:, :, padding:padding + h, padding:padding + w],)


BACKWARD_RULES = {
    'add': _grad_add,
    'sub': _grad_sub,
    'mul': _grad_mul,
    'scale': _grad_scale,
    'sum': _grad_sum,
    'reshape': _grad_reshape,
    'permute': _grad_permute,
    'concat': _grad_concat,
    'matmul': _grad_matmul,
    'linear': _grad_linear,
    'softmax': _grad_softmax,
    'layer_norm': _grad_layer_norm,
    'gelu': _grad_gelu,
    'cross_entropy': _grad_cross_entropy,
    'unfold': _grad_unfold,
}


def backward(loss):
    """Gradients of a traced scalar with respect to every traced leaf.

    Returns a dict keyed by the leaf Tensor objects. Nodes are visited once
    each, newest first, so accumulation order is fixed.
    """
    if loss.node is None:
        raise TapeError("backward() needs a loss produced under trace()")
    if loss.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones(loss.shape)}
    leaves = {}
    tape = loss.node.tape
    for node in reversed(tape.nodes[:loss.node.index + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, ig in zip(node.inputs, BACKWARD_RULES[node.op](node, g)):
            if not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + ig if key in grads else np.array(ig)
            if inp.node is None:
                leaves[key] = inp
    return {leaves[key]: grads[key] for key in leaves}


# ---------------------------------------------------------------- rng

def _splitmix64(state):
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


def derive_seed(seed, index):
    """Order-independent per-index seed, hashed from (seed, index)."""
    _, a = _splitmix64(seed & MASK64)
    _, b = _splitmix64((a ^ (index & MASK64)) & MASK64)
    return b


class Rng:
    """xoshiro256++ seeded through splitmix64; identical draws on every platform."""

    def __init__(self, seed):
        self.seed = int(seed) & MASK64
        sm = self.seed
        state = []
        for _ in range(4):
            sm, value = _splitmix64(sm)
            state.append(value)
        self._s = state

    def next_u64(self):
        s0, s1, s2, s3 = self._s
        result = (_rotl((s0 + s3) & MASK64, 23) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self):
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform(self, low=0.0, high=1.0, size=None):
        if size is None:
            return low + (high - low) * self.random()
        n = int(np.prod(size))
        return low + (high - low) * np.array([self.random() for _ in range(n)]).reshape(size)

    def integers(self, low, high):
        """Integer in [low, high)."""
        return low + self.next_u64() % (high - low)

    def _standard_normal(self):
        # Box-Muller, one value per call keeps the stream position simple
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normal(self, loc=0.0, std=1.0, size=None):
        if size is None:
            return loc + std * self._standard_normal()
        n = int(np.prod(size))
        return loc + std * np.array([self._standard_normal() for _ in range(n)]).reshape(size)

    def truncated_normal(self, std, size, bound=2.0):
        """Normal draws rejected outside +-bound standard deviations."""
        n = int(np.prod(size))
        out = np.empty(n)
        for i in range(n):
            z = self._standard_normal()
            while abs(z) > bound:
                z = self._standard_normal()
            out[i] = z
        return std * out.reshape(size)

    def permutation(self, n):
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            order[i], order[j] = order[j], order[i]
        return np.array(order, dtype=np.int64)

    def spawn(self, index):
        return Rng(derive_seed(self.seed, index))


# --------------------------------------------------------- serialization

def write_tensor(stream, tensor):
    data = np.asarray(tensor.data if isinstance(tensor, Tensor) else tensor, dtype='<f8')
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack('<BI', TENSOR_VERSION, data.ndim))
    stream.write(struct.pack(f'<{data.ndim}I', *data.shape))
    stream.write(np.ascontiguousarray(data).tobytes())


def read_exact(stream, count, what):
    """Reads exactly `count` bytes or raises FormatError naming `what`."""
    raw = stream.read(count)
    if len(raw) != count:
        raise FormatError(f"truncated {what}: expected {count} bytes, got {len(raw)}")
    return raw


def read_tensor(stream):
    magic = stream.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack('<BI', read_exact(stream, 5, 'tensor header'))
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    dims = struct.unpack(f'<{rank}I', read_exact(stream, 4 * rank, 'tensor shape'))
    count = int(np.prod(dims)) if rank else 1
    payload = read_exact(stream, 8 * count, 'tensor payload')
    return Tensor(np.frombuffer(payload, dtype='<f8').reshape(dims))


# ---------------------------------------------------------- verification

def fd_check(f, params, eps=config.FD_EPS, floor=config.FD_FLOOR, max_entries=None, rng=None):
    """Largest relative error between backward() and central differences.

    `f` maps the given tensors (positionally) to a scalar Tensor. Relative
    error per entry is |a - n| / max(|a|, |n|, floor). With `max_entries`,
    only that many randomly chosen entries (drawn from `rng`) are checked.
    """
    params = [params] if isinstance(params, Tensor) else list(params)
    leaves = [Tensor(p.data, requires_grad=True, name=p.name) for p in params]
    with trace():
        loss = f(*leaves)
    if loss.node is None:
        analytic = [np.zeros(p.shape) for p in leaves]
    else:
        grads = backward(loss)
        analytic = [grads.get(p, np.zeros(p.shape)).reshape(p.shape) for p in leaves]

    entries = [(k, i) for k, p in enumerate(leaves) for i in range(p.size)]
    if max_entries is not None and max_entries < len(entries):
        rng = rng or Rng(config.SEED)
        chosen = rng.permutation(len(entries))[:max_entries]
        entries = [entries[j] for j in sorted(chosen)]

    def evaluate(k, i, delta):
        bumped = np.array(leaves[k].data)
        bumped.reshape(-1)[i] += delta
        args = list(leaves)
        args[k] = Tensor(bumped)
        return f(*args).item()

    worst = 0.0
    for k, i in entries:
        numeric = (evaluate(k, i, eps) - evaluate(k, i, -eps)) / (2.0 * eps)
        a = float(analytic[k].reshape(-1)[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    logging.debug(f"fd_check over {len(entries)} entries: max relative error {worst:.3e}")
    return worst
