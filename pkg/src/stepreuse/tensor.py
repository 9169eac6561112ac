"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive records onto the thread-local active tape when one is open
and any operand requires gradients.  ``backward`` replays the tape once, in
reverse creation order, accumulating gradients into the operands.  All data
is stored row-major as ``numpy.float64``; reduction order is fixed, so
identical inputs produce bit-identical outputs.
"""

from __future__ import annotations

import threading

import numpy as np

_tls = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


def _active_tape():
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager around the forward computation; call
    :func:`backward` on a scalar produced inside it.  A tape may be
    consumed by backward exactly once.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False
        self._outer = None

    def __enter__(self):
        self._outer = _active_tape()
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = self._outer
        return False


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None

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
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return narrow(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, inputs, grad_fn):
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:

        def _backward(g, inputs=inputs, grad_fn=grad_fn):
            for t, gi in zip(inputs, grad_fn(g)):
                if t.requires_grad and gi is not None:
                    _accumulate(t, gi)

        out._backward = _backward
        tape._nodes.append(out)
    return out


def backward(loss: Tensor):
    """Populate gradients of everything ``loss`` depends on.

    ``loss`` must be a scalar produced under the currently active tape.
    The tape is consumed; calling backward twice on one tape raises.
    """
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward: no active tape; compute the loss inside `with Tape():`")
    if tape._consumed:
        raise RuntimeError("backward: tape already consumed by a previous backward pass")
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape._nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)
            # tape nodes are op outputs, never leaves; free their buffers
            node.grad = None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    """Elementwise a**p for a constant scalar exponent p."""
    a = as_tensor(a)
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def absolute(a):
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), lambda g: (g * 0.5 / out_data,))


# -- activations ----------------------------------------------------------

def relu(a):
    a = as_tensor(a)
    return _make(np.maximum(a.data, 0.0), (a,),
                 lambda g: (g * (a.data > 0.0),))


def sigmoid(a):
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def silu(a):
    """x * sigmoid(x)."""
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _make(a.data * s, (a,),
                 lambda g: (g * (s * (1.0 + a.data * (1.0 - s))),))


# -- reductions -----------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) else np.full(shape, g)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    return _make(out_data, (a,),
                 lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.size if axis is None else a.shape[axis]
    return _make(out_data, (a,),
                 lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / n,))


def l1_norm(a):
    """Sum of absolute values, reduced over all elements."""
    return tensor_sum(absolute(a))


def l2_norm_sq(a):
    """Sum of squares, reduced over all elements."""
    return tensor_sum(mul(a, a))


def mean_abs(a):
    """Mean absolute value; the per-element L1 used by the motion losses."""
    return mean(absolute(a))


# -- softmax family --------------------------------------------------------

def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), grad_fn)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    sm = np.exp(out_data)

    def grad_fn(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out_data, (a,), grad_fn)


# -- shape manipulation ----------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,),
                 lambda g: (g.transpose(inverse),))


def narrow(a, key):
    """Basic slicing; gradients scatter back into the sliced region."""
    a = as_tensor(a)
    out_data = a.data[key]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(out_data, (a,), grad_fn)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out_data, tensors, grad_fn)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


# -- convolution and resampling ---------------------------------------------

def conv_output_size(size, kernel, stride, padding):
    """Output length along one axis: floor((size + 2*padding - kernel)/stride) + 1."""
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp, kh, kw, stride, ho, wo):
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, kh, kw, ho * wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, :, i, j, :] = patch.reshape(b, c, ho * wo)
    return cols.reshape(b, c * kh * kw, ho * wo)


def conv2d(x, w, bias=None, stride=1, padding=0):
    """2-D convolution over (B, C, H, W) input with (F, C, kh, kw) weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    b, c, h, wdt = x.shape
    f, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wdt, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {x.shape} "
                         f"with stride={stride} padding={padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = w.data.reshape(f, -1)
    out_data = np.matmul(w2, cols).reshape(b, f, ho, wo)
    inputs = (x, w) if bias is None else (x, w, as_tensor(bias))
    if bias is not None:
        out_data = out_data + inputs[2].data.reshape(1, f, 1, 1)

    def grad_fn(g):
        g2 = g.reshape(b, f, ho * wo)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(w2.T, g2).reshape(b, c, kh, kw, ho * wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, i, j, :].reshape(b, c, ho, wo)
        dx = dxp[:, :, padding:padding + h, padding:padding + wdt] if padding else dxp
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return _make(out_data, inputs, grad_fn)


def upsample_nearest(x, factor):
    """Nearest-neighbour upsampling of (B, C, H, W) by an integer factor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest: expected 4-D input, got {x.shape}")
    f = int(factor)
    b, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def grad_fn(g):
        return (g.reshape(b, c, h, f, w, f).sum(axis=(3, 5)),)

    return _make(out_data, (x,), grad_fn)
