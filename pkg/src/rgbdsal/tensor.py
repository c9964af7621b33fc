"""Dense float64 tensors with reverse-mode differentiation.

Only the operations the saliency networks need are provided. Every op takes
and returns :class:`Tensor`; gradients are accumulated into ``.grad`` by
:func:`backward`.
"""

import contextlib

import numpy as np

from . import kernels
from .errors import ConfigError, TrainingError, UsageError

EPS = 1e-7

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (frozen-network forward passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = None if value is None else np.asarray(value, dtype=np.float64)

    def zero_grad(self):
        self._grad = None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named trainable tensor with an SGD momentum buffer."""

    __slots__ = ("name", "momentum_buffer")

    def __init__(self, data, name):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.momentum_buffer = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t._grad is None:
        t._grad = np.array(g, dtype=np.float64, copy=True).reshape(t.data.shape)
    else:
        t._grad += g


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Intermediate accumulators are reset on entry, so calling this twice on one
    graph after clearing the leaves gives identical gradients. Leaf gradients
    accumulate across calls until cleared.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    for node in order:
        if node._backward is not None:
            node._grad = None
    loss._grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of a BxCxHxW input with an OxCxKhxKw kernel."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    o, kc, kh, kw = weight.shape
    if kc != c:
        raise ConfigError(f"conv2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ConfigError(
            f"conv2d output extent is not an integer for input {x.shape}, kernel {weight.shape}, "
            f"stride {stride}, padding {padding}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d output extent must be positive for input {x.shape}, kernel {weight.shape}")
    if bias is not None and bias.shape != (o,):
        raise ConfigError(f"conv2d bias shape {bias.shape} does not match kernel {weight.shape}")

    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(b, c, h * w)
    else:
        cols = kernels.im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(b, o, ho, wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g):
        g2 = g.reshape(b, o, ho * wo)
        if weight.requires_grad:
            _accum(weight, np.einsum("bol,bkl->ok", g2, cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g2.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2)
            if pointwise:
                _accum(x, dcols.reshape(x.shape))
            else:
                _accum(x, kernels.col2im(dcols, x.shape, kh, kw, stride, padding))

    return _make(out, parents, _backward, "conv2d")


def maxpool2d(x, window=2, stride=2):
    if window != 2 or stride != 2:
        raise ConfigError("maxpool2d supports only window 2, stride 2")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"maxpool2d needs even spatial extents, got {x.shape}")
    out, arg = kernels.maxpool2x2(x.data)

    def _backward(g):
        _accum(x, kernels.maxpool2x2_backward(g, arg, x.shape))

    return _make(out, (x,), _backward, "maxpool2d")


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def _backward(g):
        _accum(x, g * mask)

    return _make(out, (x,), _backward, "relu")


def sigmoid(x):
    # split by sign to keep exp() from overflowing
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def _backward(g):
        _accum(x, g * out * (1.0 - out))

    return _make(out, (x,), _backward, "sigmoid")


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation {kind!r}")


def bilinear_matrix(n_in, factor):
    """Interpolation weights (n_in*factor, n_in), half-pixel centres, edge clamped."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = min(max((i + 0.5) / factor - 0.5, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m


_BILINEAR_CACHE = {}


def _bilinear(n_in, factor):
    key = (n_in, factor)
    if key not in _BILINEAR_CACHE:
        _BILINEAR_CACHE[key] = bilinear_matrix(n_in, factor)
    return _BILINEAR_CACHE[key]


def upsample_bilinear(x, factor):
    """Fixed (non-learnable) bilinear upsampling by an integer factor."""
    if int(factor) != factor or factor < 1:
        raise ConfigError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return x
    b, c, h, w = x.shape
    uh = _bilinear(h, factor)
    uw = _bilinear(w, factor)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def _backward(g):
        _accum(x, np.matmul(np.matmul(uh.T, g), uw))

    return _make(out, (x,), _backward, "upsample")


def upsample_to(x, size):
    """Upsample a map to spatial ``size`` (an integer multiple of its extent)."""
    h = x.shape[2]
    if size % h or size // h != size / h or x.shape[3] * (size // h) != size:
        raise ConfigError(f"cannot upsample {x.shape} to {size}x{size} by an integer factor")
    return upsample_bilinear(x, size // h)


def concat_channels(inputs):
    inputs = list(inputs)
    if not inputs:
        raise ConfigError("concat_channels needs at least one input")
    if len(inputs) == 1:
        return inputs[0]
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ConfigError(f"concat_channels extent mismatch: {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def _backward(g):
        for t, lo, hi in zip(inputs, bounds[:-1], bounds[1:]):
            _accum(t, g[:, lo:hi])

    return _make(out, tuple(inputs), _backward, "concat")


def add(a, b):
    if a.shape != b.shape:
        raise ConfigError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def _backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), _backward, "add")


def weighted_sum(tensors, weights):
    """sum_j weights[j] * tensors[j] with scalar (size-1) weight tensors."""
    tensors = list(tensors)
    weights = list(weights)
    if len(tensors) != len(weights) or not tensors:
        raise ConfigError("weighted_sum needs matching nonempty tensor and weight lists")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ConfigError(f"weighted_sum shape mismatch: {shape} vs {t.shape}")
    for w in weights:
        if w.data.size != 1:
            raise ConfigError(f"weighted_sum weights must be scalars, got shape {w.shape}")
    out = np.zeros(shape)
    for t, w in zip(tensors, weights):
        out += w.data.reshape(()) * t.data

    def _backward(g):
        for t, w in zip(tensors, weights):
            if w.requires_grad:
                _accum(w, np.array([np.sum(g * t.data)]).reshape(w.shape))
            if t.requires_grad:
                _accum(t, g * w.data.reshape(()))

    return _make(out, tuple(tensors) + tuple(weights), _backward, "weighted_sum")


def sum_all(x):
    def _backward(g):
        _accum(x, np.broadcast_to(g.reshape(()), x.shape))

    return _make(np.array(x.data.sum()), (x,), _backward, "sum")


def scale(x, c):
    """Multiply by a constant (not differentiated)."""
    c = float(c)

    def _backward(g):
        _accum(x, g * c)

    return _make(x.data * c, (x,), _backward, "scale")


def clamp(x, lo=EPS, hi=1.0 - EPS):
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)

    def _backward(g):
        _accum(x, g * inside)

    return _make(out, (x,), _backward, "clamp")


def l2_loss(x, y):
    """Sum of squared differences (no averaging)."""
    if x.shape != y.shape:
        raise ConfigError(f"l2_loss shape mismatch: {x.shape} vs {y.shape}")
    diff = x.data - y.data

    def _backward(g):
        g = g.reshape(())
        _accum(x, 2.0 * g * diff)
        _accum(y, -2.0 * g * diff)

    return _make(np.array(np.sum(diff * diff)), (x, y), _backward, "l2_loss")


def cross_entropy(pred, target):
    """Mean over all elements of -[y log p + (1-y) log(1-p)].

    Predictions are expected inside [EPS, 1-EPS] (see :func:`clamp`); values
    are additionally guarded here so a stray 0 or 1 never produces inf.
    """
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ConfigError(f"cross_entropy shape mismatch: {pred.shape} vs {target.shape}")
    p = np.clip(pred.data, EPS, 1.0 - EPS)
    y = target.data
    n = p.size
    val = -np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)) / n

    def _backward(g):
        g = g.reshape(())
        _accum(pred, g * (p - y) / (p * (1.0 - p)) / n)

    return _make(np.array(val), (pred,), _backward, "cross_entropy")


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def sgd_step(params, lr, momentum=0.9):
    """buffer <- momentum*buffer + grad; value <- value - lr*buffer; clear grads."""
    if lr < 0:
        raise ConfigError(f"learning rate must be nonnegative, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
    params = list(params)
    for p in params:
        if p._grad is not None and not np.all(np.isfinite(p._grad)):
            raise TrainingError(f"nonfinite gradient in parameter {p.name!r}")
    for p in params:
        p.momentum_buffer *= momentum
        if p._grad is not None:
            p.momentum_buffer += p._grad
        if lr != 0.0:
            p.data -= lr * p.momentum_buffer
        p._grad = None


def clip_grad_norm(params, max_norm):
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = list(params)
    sq = 0.0
    for p in params:
        if p._grad is not None:
            sq += float(np.sum(p._grad * p._grad))
    norm = float(np.sqrt(sq))
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        k = max_norm / norm
        for p in params:
            if p._grad is not None:
                p._grad *= k
    return norm


def zero_grad(params):
    for p in params:
        p._grad = None
