"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and
a rule mapping the output gradient to input gradients.  Calling
:func:`backward` on a scalar collects the reachable operations into a
:class:`Tape` ordered by execution, then replays it in reverse.

Only the operations the CNN-attention classifier and the GAN need are
provided; everything is batched along leading axes.
"""

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UsageError

DTYPE = np.float64
LOG_EPS = 1e-7

_seq = itertools.count()
_state = threading.local()

# sigmoid is kept strictly inside (0, 1) even where float64 would round to 0 or 1
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op=""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._seq = next(_seq)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, rule, op):
    """Wrap ``data``; attach the gradient rule only when a parent needs it."""
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), rule, op)
    return Tensor(data, _op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- tape


@dataclass
class Tape:
    """Operations reachable from a loss, in execution order."""

    ops: list = field(default_factory=list)

    @classmethod
    def record(cls, loss):
        seen = set()
        ops = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            if t._backward is not None:
                ops.append(t)
            stack.extend(t._parents)
        ops.sort(key=lambda t: t._seq)
        return cls(ops)

    def backward(self, loss):
        loss.grad = np.ones_like(loss.data)
        for out in reversed(self.ops):
            if out.grad is None:
                continue
            grads = out._backward(out.grad)
            for parent, g in zip(out._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=DTYPE, copy=True)
                else:
                    parent.grad = parent.grad + g


def backward(loss, tape=None):
    """Populate ``.grad`` on every tensor that ``loss`` depends on.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor with requires_grad=True")
    if tape is None:
        tape = Tape.record(loss)
    tape.backward(loss)
    return tape


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def power(a, exponent):
    if not isinstance(exponent, (int, float)):
        raise UsageError("power() only supports a constant exponent")
    return _result(a.data ** exponent, (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1),), f"pow{exponent}")


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a):
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _check_finite(x, kind):
    if not np.all(np.isfinite(x.data)):
        raise ValueError(f"{kind}: input contains non-finite values")


def relu(x):
    _check_finite(x, "relu")
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, alpha):
    _check_finite(x, "leaky_relu")
    slope = np.where(x.data > 0, 1.0, alpha)
    return _result(x.data * slope, (x,), lambda g: (g * slope,), "leaky_relu")


def sigmoid(x):
    _check_finite(x, "sigmoid")
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    s = np.clip(s, _SIG_LO, _SIG_HI)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def activation(kind, x, alpha=None):
    """Apply ``relu``, ``leaky_relu`` (needs ``alpha``), ``sigmoid``, ``tanh`` or ``softmax``."""
    if (kind == "leaky_relu") != (alpha is not None):
        raise UsageError("alpha is required for leaky_relu and only for leaky_relu")
    if kind is None or kind == "linear":
        return x
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "softmax":
        return softmax(x, axis=-1)
    raise UsageError(f"unknown activation {kind!r}")


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), rule, "softmax")


# ---------------------------------------------------------------- reductions / shape


def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(out, (x,), rule, "sum")


def tmean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def swapaxes(x, a1, a2):
    return _result(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), rule, "matmul")


# ---------------------------------------------------------------- layers


def dense(x, weight, bias):
    """Affine map ``x @ weight + bias`` along the last axis."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weight.shape[1]},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = (x2 @ weight.data + bias.data).reshape(lead + (weight.shape[1],))

    def rule(g):
        g2 = g.reshape(-1, weight.shape[1])
        return ((g2 @ weight.data.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0))

    return _result(out, (x, weight, bias), rule, "dense")


def conv_output_length(length, stride):
    return -(-length // stride)


def conv1d(x, kernels, bias, stride=1, padding="same"):
    """1-D convolution over ``x[..., L, C_in]`` with ``kernels[C_out, C_in, k]``.

    'same' padding puts (k-1)/2 zeros on each side; output position i is
    centred on input position i*stride, giving ceil(L/stride) outputs.
    """
    if padding != "same":
        raise UsageError("only 'same' padding is supported")
    c_out, c_in, k = kernels.shape
    if k % 2 != 1:
        raise UsageError(f"'same' padding needs an odd kernel size, got {k}")
    if stride < 1:
        raise UsageError(f"stride must be >= 1, got {stride}")
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d: input has {x.shape[-1]} channels, kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d: bias shape {bias.shape} != ({c_out},)")

    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3:
        raise ShapeError(f"conv1d: expected [L, C] or [B, L, C], got {x.shape}")
    batch, length, _ = xd.shape
    pad = (k - 1) // 2
    n_out = conv_output_length(length, stride)
    xp = np.pad(xd, ((0, 0), (pad, pad), (0, 0)))
    starts = np.arange(n_out) * stride
    cols = xp[:, starts[:, None] + np.arange(k)[None, :], :]  # [B, n_out, k, C_in]
    w = kernels.data.transpose(2, 1, 0).reshape(k * c_in, c_out)
    cols2 = cols.reshape(batch * n_out, k * c_in)
    out = (cols2 @ w + bias.data).reshape(batch, n_out, c_out)
    if unbatched:
        out = out[0]

    def rule(g):
        g2 = g.reshape(batch * n_out, c_out)
        gw = (cols2.T @ g2).reshape(k, c_in, c_out).transpose(2, 1, 0)
        gcols = (g2 @ w.T).reshape(batch, n_out, k, c_in)
        gxp = np.zeros_like(xp)
        for t in range(k):
            gxp[:, t: t + stride * (n_out - 1) + 1: stride, :] += gcols[:, :, t, :]
        gx = gxp[:, pad: pad + length, :]
        return (gx[0] if unbatched else gx, gw, g2.sum(axis=0))

    return _result(out, (x, kernels, bias), rule, "conv1d")


def global_avg_pool1d(x):
    """Mean over the length axis of ``x[..., L, C]``."""
    if x.ndim < 2:
        raise ShapeError(f"global_avg_pool1d needs [.., L, C], got {x.shape}")
    if x.shape[-2] == 0:
        raise ShapeError("global_avg_pool1d: empty length axis")
    return tmean(x, axis=x.ndim - 2)


def dropout(x, rate, training, seed=None):
    """Inverted dropout; the exact identity when not training or ``rate == 0``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    scale = np.where(rng.random(x.shape) >= rate, 1.0 / (1.0 - rate), 0.0)
    return _result(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


# ---------------------------------------------------------------- losses


def binary_ce(probs, targets):
    """Mean binary log-loss.  Probabilities are clamped to [1e-7, 1 - 1e-7].

    The clamp is applied to the value only: the gradient is the log-loss
    derivative evaluated at the clamped probability, so a saturated unit
    still receives a learning signal.
    """
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=DTYPE)
    if t.shape != probs.shape:
        t = t.reshape(probs.shape)
    p = np.clip(probs.data, LOG_EPS, 1.0 - LOG_EPS)
    n = p.size
    value = -np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    return _result(value, (probs,), lambda g: (g * (-(t / p) + (1.0 - t) / (1.0 - p)) / n,),
                   "binary_ce")


def categorical_ce(probs, targets):
    """Mean categorical log-loss; ``targets`` are class indices or one-hot rows."""
    if probs.ndim != 2:
        raise ShapeError(f"categorical_ce expects [B, K] probabilities, got {probs.shape}")
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if t.ndim == 1:
        onehot = np.zeros(probs.shape)
        onehot[np.arange(len(t)), t.astype(int)] = 1.0
    else:
        onehot = t.astype(DTYPE)
    if onehot.shape != probs.shape:
        raise ShapeError(f"categorical_ce: targets {onehot.shape} vs probs {probs.shape}")
    p = np.clip(probs.data, LOG_EPS, 1.0)
    b = probs.shape[0]
    value = -np.sum(onehot * np.log(p)) / b
    return _result(value, (probs,), lambda g: (-g * onehot / p / b,), "categorical_ce")


def loss(kind, probs, targets):
    if kind == "binary_ce":
        return binary_ce(probs, targets)
    if kind == "categorical_ce":
        return categorical_ce(probs, targets)
    raise UsageError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------- init + optimizer


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``params`` maps keys to tensors and ``grads`` maps the same keys to arrays
    (missing or ``None`` means zero).
    """
    if lr <= 0:
        raise UsageError("learning rate must be positive")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {key} has shape {g.shape}, parameter {p.shape}")
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m = state.m[key] = beta1 * state.m[key] + (1.0 - beta1) * g
        v = state.v[key] = beta2 * state.v[key] + (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {k: p.grad for k, p in self.params.items()}
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
