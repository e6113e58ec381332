"""Dense float64 arrays with reverse-mode automatic differentiation.

A deliberately small engine: a `Tensor` wraps a numpy float64 array, every
operation that touches a gradient-requiring input records a backward closure
on a `Tape`, and `backward(loss)` replays the tape once in exact reverse
execution order. The op set is fixed -- elementwise arithmetic, matmul,
shape ops, a handful of activations, grouped 1-D convolution, pooling,
batch normalization and the softmax family -- which is enough to express a
trainable wavelet front end, a CNN/attention/TCN classifier and their
training losses. A finite-difference gradient checker validates all of it.

Conventions:
  * everything is double precision;
  * a tape is rebuilt on every forward pass and may be replayed only once;
  * `conv1d` computes a true linear convolution (kernel flipped), with
    "same" padding of ceil((K-1)/2) on the left and floor((K-1)/2) on the
    right so even kernel lengths are well-defined.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable taping inside the block; forwards run data-only."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tape:
    """Ordered record of executed operations for one forward pass.

    Tapes from disjoint subgraphs merge (union-find) the first time an
    operation consumes inputs from both; replay order stays consistent
    because merging only ever joins sets with no cross-dependencies.
    A tape can be replayed exactly once.
    """

    __slots__ = ("_nodes", "_spent", "_parent")

    def __init__(self):
        self._nodes = []
        self._spent = False
        self._parent = None

    def _root(self):
        t = self
        while t._parent is not None:
            t = t._parent
        # path compression
        u = self
        while u._parent is not None and u._parent is not t:
            u._parent, u = t, u._parent
        return t

    def __len__(self):
        return len(self._root()._nodes)


def _merge_tapes(tapes):
    root = tapes[0]._root()
    for t in tapes[1:]:
        r = t._root()
        if r is root:
            continue
        root._nodes.extend(r._nodes)
        r._nodes = []
        r._parent = root
    return root


class Tensor:
    """Dense float64 array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")
    __array_ufunc__ = None  # keep numpy from hijacking mixed expressions

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

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
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def backward(self, leaves=None):
        backward(self, leaves=leaves)

    # -- arithmetic sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __pow__(self, p):
        return power(self, p)

    # -- shape sugar --------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def narrow(self, axis, start, length):
        return narrow(self, axis, start, length)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def tensor(data, requires_grad=False):
    """Create a leaf tensor owning a float64 copy of `data`."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accum(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float64)
    if g.shape != t.data.shape:
        raise DimensionError(
            f"gradient shape {g.shape} does not match tensor shape {t.data.shape}"
        )
    # rebinding only -- .grad arrays are never mutated in place
    t.grad = g if t.grad is None else t.grad + g


def _make(data, inputs, grad_fn):
    """Build the result tensor of an op, recording `grad_fn` when taped.

    `grad_fn(g)` receives d(loss)/d(output) and must accumulate into the
    inputs via `_accum`.
    """
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        tapes = [t._tape for t in inputs if t._tape is not None]
        tape = _merge_tapes(tapes) if tapes else Tape()
        out = Tensor(data)
        out.requires_grad = True
        out._tape = tape

        def node():
            if out.grad is not None:
                grad_fn(out.grad)

        tape._nodes.append(node)
        return out
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), back)


def sub(a, b):
    a, b = _lift(a), _lift(b)

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), back)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def back(g):
        _accum(a, _unbroadcast(g * bd, a.data.shape))
        _accum(b, _unbroadcast(g * ad, b.data.shape))

    return _make(ad * bd, (a, b), back)


def div(a, b):
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def back(g):
        _accum(a, _unbroadcast(g / bd, a.data.shape))
        _accum(b, _unbroadcast(-g * ad / (bd * bd), b.data.shape))

    return _make(ad / bd, (a, b), back)


def neg(a):
    a = _lift(a)

    def back(g):
        _accum(a, -g)

    return _make(-a.data, (a,), back)


def power(a, p):
    """Elementwise a**p for a constant scalar exponent."""
    a = _lift(a)
    p = float(p)
    ad = a.data

    def back(g):
        _accum(a, g * p * ad ** (p - 1.0))

    return _make(ad**p, (a,), back)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul requires tensors with at least 2 dimensions")
    ad, bd = a.data, b.data

    def back(g):
        _accum(a, _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape))
        _accum(b, _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape))

    return _make(ad @ bd, (a, b), back)


# ---------------------------------------------------------------------------
# elementwise functions
# ---------------------------------------------------------------------------


def exp(a):
    a = _lift(a)
    out_data = np.exp(a.data)

    def back(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), back)


def log(a):
    a = _lift(a)
    ad = a.data

    def back(g):
        _accum(a, g / ad)

    return _make(np.log(ad), (a,), back)


def sqrt(a):
    a = _lift(a)
    out_data = np.sqrt(a.data)

    def back(g):
        _accum(a, g * 0.5 / out_data)

    return _make(out_data, (a,), back)


def absolute(a):
    """|a| with subgradient 0 at exactly 0."""
    a = _lift(a)
    ad = a.data

    def back(g):
        _accum(a, g * np.sign(ad))

    return _make(np.abs(ad), (a,), back)


def sign(a):
    """Elementwise sign as a detached constant (zero gradient everywhere)."""
    a = _lift(a)
    return Tensor(np.sign(a.data))


def _sigmoid(x):
    # tanh form: exact 0/1 saturation, no overflow anywhere
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = _lift(a)
    out_data = _sigmoid(a.data)

    def back(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), back)


def softplus(a):
    """ln(1 + e^x), computed without overflow; derivative is sigmoid(x)."""
    a = _lift(a)
    ad = a.data

    def back(g):
        _accum(a, g * _sigmoid(ad))

    return _make(np.logaddexp(0.0, ad), (a,), back)


def elu(a):
    """ELU with alpha fixed at 1: x for x >= 0, e^x - 1 otherwise."""
    a = _lift(a)
    ad = a.data
    neg_part = np.expm1(np.minimum(ad, 0.0))
    out_data = np.where(ad >= 0.0, ad, neg_part)

    def back(g):
        _accum(a, g * np.where(ad >= 0.0, 1.0, neg_part + 1.0))

    return _make(out_data, (a,), back)


def relu(a):
    """max(x, 0) with derivative 0 at exactly 0."""
    a = _lift(a)
    ad = a.data

    def back(g):
        _accum(a, g * (ad > 0.0))

    return _make(np.maximum(ad, 0.0), (a,), back)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False):
    a = _lift(a)
    axes = _norm_axes(axis, a.data.ndim)
    in_shape = a.data.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        _accum(a, np.broadcast_to(g, in_shape).copy())

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), back)


def mean_(a, axis=None, keepdims=False):
    a = _lift(a)
    axes = _norm_axes(axis, a.data.ndim)
    count = int(np.prod([a.data.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = _lift(a)
    in_shape = a.data.shape

    def back(g):
        _accum(a, g.reshape(in_shape))

    return _make(a.data.reshape(shape), (a,), back)


def transpose(a, axes=None):
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)

    def back(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), back)


def narrow(a, axis, start, length):
    """Slice `length` entries starting at `start` along `axis`."""
    a = _lift(a)
    axis = axis % a.data.ndim
    if start < 0 or start + length > a.data.shape[axis]:
        raise DimensionError(
            f"narrow [{start}:{start + length}] out of range for axis of "
            f"extent {a.data.shape[axis]}"
        )
    idx = tuple(
        slice(start, start + length) if i == axis else slice(None)
        for i in range(a.data.ndim)
    )
    in_shape = a.data.shape

    def back(g):
        dx = np.zeros(in_shape)
        dx[idx] = g
        _accum(a, dx)

    return _make(a.data[idx].copy(), (a,), back)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of zero tensors")
    axis = axis % tensors[0].data.ndim
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def back(g):
        for t, off, size in zip(tensors, offsets, sizes):
            idx = tuple(
                slice(off, off + size) if i == axis else slice(None)
                for i in range(g.ndim)
            )
            _accum(t, g[idx])

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back
    )


def pad_axis(a, axis, before, after):
    """Zero-pad along one axis."""
    a = _lift(a)
    axis = axis % a.data.ndim
    widths = [(0, 0)] * a.data.ndim
    widths[axis] = (before, after)
    extent = a.data.shape[axis]
    idx = tuple(
        slice(before, before + extent) if i == axis else slice(None)
        for i in range(a.data.ndim)
    )

    def back(g):
        _accum(a, g[idx])

    return _make(np.pad(a.data, widths), (a,), back)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax(a, axis=-1):
    """Numerically stabilized softmax along `axis` (max subtraction)."""
    a = _lift(a)
    axis = axis % a.data.ndim
    if a.data.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), back)


def log_softmax(a, axis=-1):
    a = _lift(a)
    axis = axis % a.data.ndim
    if a.data.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = np.exp(ls)

    def back(g):
        _accum(a, g - y * g.sum(axis=axis, keepdims=True))

    return _make(ls, (a,), back)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def conv1d(x, w, groups=1, pad_left=None, pad_right=None, dilation=1):
    """Grouped 1-D linear convolution along the last axis.

    x: Tensor[N, C_in, T] (a 2-D [C_in, T] input is promoted and the result
    squeezed back); w: Tensor[C_out, C_in/groups, K]. True convolution: the
    kernel is flipped, so a unit impulse reproduces the kernel in forward
    order. Padding defaults to "same": ceil(span/2) left, floor(span/2)
    right, with span = (K-1)*dilation; pass both pads explicitly for causal
    or valid variants.
    """
    x, w = _lift(x), _lift(w)
    if x.data.ndim == 2:
        out = conv1d(
            reshape(x, (1,) + x.data.shape),
            w,
            groups=groups,
            pad_left=pad_left,
            pad_right=pad_right,
            dilation=dilation,
        )
        return reshape(out, out.data.shape[1:])
    if x.data.ndim != 3:
        raise DimensionError(f"conv1d expects a 2-D or 3-D input, got {x.data.ndim}-D")
    if w.data.ndim != 3:
        raise DimensionError(f"conv1d kernels must be 3-D, got {w.data.ndim}-D")
    n, c_in, t = x.data.shape
    c_out, c_in_g, k = w.data.shape
    if k < 1:
        raise DimensionError("kernel length must be >= 1")
    if dilation < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")
    if groups < 1 or c_in % groups != 0 or c_out % groups != 0:
        raise ConfigError(
            f"groups={groups} must divide both C_in={c_in} and C_out={c_out}"
        )
    if c_in_g * groups != c_in:
        raise DimensionError(
            f"kernel shape {w.data.shape} inconsistent with C_in={c_in}, "
            f"groups={groups}"
        )
    span = (k - 1) * dilation
    if (pad_left is None) != (pad_right is None):
        raise ConfigError("pass both pad_left and pad_right, or neither")
    if pad_left is None:
        pad_left = (span + 1) // 2
        pad_right = span - pad_left
    t_out = t + pad_left + pad_right - span
    if t_out < 1:
        raise DimensionError(
            f"input length {t} too short for kernel span {span + 1} with "
            f"padding ({pad_left}, {pad_right})"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_left, pad_right)))
    tp = xp.shape[-1]
    c_og = c_out // groups
    xg = xp.reshape(n, groups, c_in_g, tp)
    wf = np.ascontiguousarray(w.data[:, :, ::-1])  # flip: true convolution
    wg = wf.reshape(groups, c_og, c_in_g, k)

    y = np.zeros((n, groups, c_og, t_out))
    for j in range(k):
        lo = j * dilation
        y += np.matmul(wg[:, :, :, j], xg[:, :, :, lo : lo + t_out])

    def back(g):
        gg = g.reshape(n, groups, c_og, t_out)
        if w.requires_grad:
            dwg = np.zeros_like(wg)
            for j in range(k):
                lo = j * dilation
                xs = xg[:, :, :, lo : lo + t_out]
                dwg[:, :, :, j] = np.matmul(gg, xs.swapaxes(-1, -2)).sum(axis=0)
            _accum(w, dwg.reshape(c_out, c_in_g, k)[:, :, ::-1].copy())
        if x.requires_grad:
            dxg = np.zeros_like(xg)
            wgt = wg.transpose(0, 2, 1, 3)
            for j in range(k):
                lo = j * dilation
                dxg[:, :, :, lo : lo + t_out] += np.matmul(wgt[:, :, :, j], gg)
            _accum(x, dxg.reshape(n, c_in, tp)[:, :, pad_left : pad_left + t].copy())

    return _make(y.reshape(n, c_out, t_out), (x, w), back)


def conv1d_same(x, kernels, groups):
    """Channel-preserving "same" convolution.

    x: Tensor[C, T] or Tensor[N, C, T]. 2-D kernels [C, K] mean one kernel
    per channel and require groups == C (depthwise); 3-D kernels
    [C, C/groups, K] express the general grouped form. Output length always
    equals the input length.
    """
    x, kernels = _lift(x), _lift(kernels)
    c = x.data.shape[-2] if x.data.ndim in (2, 3) else None
    if c is None:
        raise DimensionError("conv1d_same expects a [C, T] or [N, C, T] input")
    if groups < 1 or c % groups != 0:
        raise ConfigError(f"groups={groups} must divide the channel count {c}")
    if kernels.data.ndim == 2:
        if groups != c:
            raise ConfigError(
                "2-D per-channel kernels imply depthwise filtering; "
                f"pass groups == C ({c}), got groups={groups}"
            )
        if kernels.data.shape[0] != c:
            raise DimensionError(
                f"expected {c} per-channel kernels, got {kernels.data.shape[0]}"
            )
        w = reshape(kernels, (c, 1, kernels.data.shape[1]))
    elif kernels.data.ndim == 3:
        if kernels.data.shape[0] != c:
            raise DimensionError(
                f"conv1d_same preserves channels: C_out={kernels.data.shape[0]} "
                f"must equal C={c}"
            )
        w = kernels
    else:
        raise DimensionError("kernels must be 2-D or 3-D")
    return conv1d(x, w, groups=groups)


def avg_pool_time(x, window):
    """Non-overlapping mean pooling along the last axis; remainder dropped."""
    x = _lift(x)
    if window < 1:
        raise ConfigError(f"pool window must be >= 1, got {window}")
    t = x.data.shape[-1]
    if t < window:
        raise DimensionError(f"input length {t} shorter than pool window {window}")
    t_out = t // window
    lead = x.data.shape[:-1]
    y = x.data[..., : t_out * window].reshape(lead + (t_out, window)).mean(axis=-1)

    def back(g):
        dx = np.zeros(x.data.shape)
        dx[..., : t_out * window] = np.repeat(g / window, window, axis=-1)
        _accum(x, dx)

    return _make(y, (x,), back)


def dropout(x, p, training, rng=None):
    """Inverted dropout: train-time mask scaled by 1/(1-p); eval is identity."""
    x = _lift(x)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs an rng")
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(mask))


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


class BatchNorm:
    """Batch normalization over axis 1 with running statistics.

    Normalizes each feature (axis 1) over all remaining axes using biased
    (population) variance. Train mode uses batch statistics and updates the
    running estimates as running = (1-momentum)*running + momentum*batch;
    eval mode uses the frozen running estimates (initialized to mean 0,
    var 1). Scale and shift are learnable per feature.
    """

    def __init__(self, num_features, eps=1e-5, momentum=0.1):
        self.num_features = num_features
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def __call__(self, x, training):
        return batchnorm(x, self, training)


def batchnorm(x, state, training):
    """Apply a `BatchNorm` state to x (feature axis 1, any extra axes)."""
    x = _lift(x)
    if x.data.ndim < 3:
        raise DimensionError("batchnorm expects [N, F, ...] with at least 3 dims")
    f = x.data.shape[1]
    if f != state.num_features:
        raise DimensionError(
            f"batchnorm state has {state.num_features} features, input has {f}"
        )
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = (1, f) + (1,) * (x.data.ndim - 2)
    gamma, beta = state.gamma, state.beta
    gb = gamma.data.reshape(bshape)
    eps = state.eps

    if training:
        n_red = x.data.size // f
        if n_red <= 1:
            raise DimensionError(
                "train-mode batchnorm needs more than one value per feature"
            )
        m = x.data.mean(axis=axes)
        v = x.data.var(axis=axes)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * m
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * v
        inv = 1.0 / np.sqrt(v + eps)
        inv_b = inv.reshape(bshape)
        xhat = (x.data - m.reshape(bshape)) * inv_b
        out_data = xhat * gb + beta.data.reshape(bshape)

        def back(g):
            _accum(beta, g.sum(axis=axes))
            _accum(gamma, (g * xhat).sum(axis=axes))
            if x.requires_grad:
                dxhat = g * gb
                term = (
                    n_red * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
                _accum(x, inv_b / n_red * term)

        return _make(out_data, (x, gamma, beta), back)

    inv = 1.0 / np.sqrt(state.running_var + eps)
    inv_b = inv.reshape(bshape)
    xhat = (x.data - state.running_mean.reshape(bshape)) * inv_b
    out_data = xhat * gb + beta.data.reshape(bshape)

    def back(g):
        _accum(beta, g.sum(axis=axes))
        _accum(gamma, (g * xhat).sum(axis=axes))
        if x.requires_grad:
            _accum(x, g * gb * inv_b)

    return _make(out_data, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------


def backward(loss, leaves=None):
    """Populate gradients of everything `loss` depends on.

    `loss` must be a scalar produced by taped operations, and its tape can
    be replayed only once. Leaves listed in `leaves` that did not
    participate in the graph receive an exact zero gradient.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss was not produced by taped operations")
    tape = loss._tape._root()
    if tape._spent:
        raise ContractError("backward called twice without a new forward pass")
    tape._spent = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape._nodes):
        node()
    if leaves is not None:
        for t in leaves:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


def zero_grads(params):
    for t in params:
        t.grad = None


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_analytic: float
    worst_numeric: float
    n_checked: int


@dataclass
class GradCheckReport:
    tol: float
    step: float
    entries: list = field(default_factory=list)

    @property
    def passed(self):
        return all(e.max_rel_err <= self.tol for e in self.entries)

    @property
    def max_rel_err(self):
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def format_table(self):
        lines = [f"{'parameter':<24} {'entries':>8} {'max rel err':>14} {'status':>8}"]
        for e in self.entries:
            status = "pass" if e.max_rel_err <= self.tol else "FAIL"
            lines.append(
                f"{e.name:<24} {e.n_checked:>8} {e.max_rel_err:>14.3e} {status:>8}"
            )
        return "\n".join(lines)


def grad_check(f, params, step=1e-5, tol=1e-4, floor=1e-6, max_entries=None, rng=None):
    """Compare analytic gradients of a scalar function to central differences.

    `f` is a zero-argument callable re-running the forward pass from the
    current values of `params` (a sequence of Tensors or (name, Tensor)
    pairs). It must be deterministic: two evaluations at identical
    parameters must agree bitwise, otherwise a ContractError is raised
    (seed or disable any randomness before checking). Relative error per
    entry is |a - n| / max(|a|, |n|, floor); a parameter passes when its
    maximum entry error is <= tol. `max_entries` subsamples large tensors
    (seeded by `rng`).
    """
    named = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            named.append(p)
        else:
            named.append((f"p{i}", p))
    tensors = [t for _, t in named]
    for name, t in named:
        if not t.requires_grad:
            raise ContractError(f"parameter {name} does not require gradients")

    with no_grad():
        v1 = f().item()
        v2 = f().item()
    if v1 != v2:
        raise ContractError(
            "function is not deterministic: two forward passes disagree "
            f"({v1!r} vs {v2!r}); fix masks and seed all randomness"
        )

    zero_grads(tensors)
    loss = f()
    backward(loss, leaves=tensors)
    analytic = {name: t.grad.copy() for name, t in named}

    report = GradCheckReport(tol=tol, step=step)
    for name, t in named:
        flat = t.data.reshape(-1)
        size = flat.size
        if max_entries is not None and size > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = np.sort(rng.choice(size, size=max_entries, replace=False))
        else:
            idxs = range(size)
        a_flat = analytic[name].reshape(-1)
        worst = (0.0, 0.0, 0.0)
        n_checked = 0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                fp = f().item()
            flat[i] = orig - step
            with no_grad():
                fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = a_flat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if rel >= worst[0]:
                worst = (rel, a, numeric)
            n_checked += 1
        report.entries.append(
            GradCheckEntry(
                name=name,
                max_rel_err=worst[0],
                worst_analytic=worst[1],
                worst_numeric=worst[2],
                n_checked=n_checked,
            )
        )
    return report
