"""A small reverse-mode autodiff tensor over numpy arrays.

Every op records its parents and a closure that maps the output gradient to
parent gradients. ``backward`` orders the recorded nodes topologically and
runs the closures once, summing gradients across fan-out.
"""

import contextlib
import contextvars

import numpy as np

from . import _kernels

DTYPE = np.float32

_grad_enabled = contextvars.ContextVar("ssat_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Run the block without recording a graph."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled():
    return _grad_enabled.get()


class GraphError(RuntimeError):
    pass


class Tensor:
    """n-d float array that may take part in an autodiff graph.

    ``data`` is converted to float32 unless it is already a floating numpy
    array of another precision (float64 is kept so gradient checks can run
    in double precision).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        # 0-d arithmetic yields numpy scalars, keep their precision too
        if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties ------------------------------------------------

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return int(self.data.size)

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self):
        backward(self)


def _make(data, parents, backward_fn):
    """Wrap an op result, recording the node only when a parent needs grad."""
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b):
    """a + b for same-shape tensors, or a + python scalar."""
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))
    _check_same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    """Multiply by a scalar constant."""
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def tanh(a):
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a):
    pos = a.data > 0  # subgradient 0 at exactly 0
    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes strictly inside the range only."""
    inside = (a.data > lo) & (a.data < hi)
    out = np.clip(a.data, lo, hi).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * inside,))


def elementwise(op_kind, a, b=None):
    """Dispatch by name: add, sub, mul, tanh, relu, scale_by_constant."""
    if op_kind == "add":
        return add(a, b)
    if op_kind == "sub":
        return sub(a, b)
    if op_kind == "mul":
        return mul(a, b)
    if op_kind == "tanh":
        return tanh(a)
    if op_kind == "relu":
        return relu(a)
    if op_kind == "scale_by_constant":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# --------------------------------------------------------------------------
# reductions and reshaping
# --------------------------------------------------------------------------

def sum_all(a):
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.full(shape, g, dtype=a.dtype),))


def reshape(a, shape):
    old = a.shape
    out = a.data.reshape(shape)
    if out.size != a.size:
        raise ValueError(f"reshape: cannot view {old} as {shape}")
    return _make(out, (a,), lambda g: (g.reshape(old),))


def concat_channels(a, b):
    """Concatenate two NCHW tensors along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels: expects NCHW tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ValueError(f"concat_channels: spatial/batch mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(a, start, stop):
    shape = a.shape
    out = a.data[:, start:stop].copy()

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _make(out, (a,), bw)


# --------------------------------------------------------------------------
# spatial ops
# --------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d cross-correlation, NCHW input, (c_out, c_in, k, k) weight."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, wc_in, k, k2 = weight.shape
    if wc_in != c_in:
        raise ValueError(f"conv2d: input has {c_in} channels but weight {weight.shape} expects {wc_in}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"conv2d: input {h}x{w} with padding {padding} smaller than kernel {k}")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1

    pointwise = k == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(n, c_in, h * w)
    else:
        cols = _kernels.im2col(x.data, k, stride, padding)
    w2 = weight.data.reshape(c_out, c_in * k * k)
    out = np.matmul(w2, cols)
    if bias is not None:
        if bias.shape != (c_out,):
            raise ValueError(f"conv2d: bias shape {bias.shape} does not match {c_out} output channels")
        out += bias.data[None, :, None]
    out = out.reshape(n, c_out, oh, ow)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g3 = g.reshape(n, c_out, oh * ow)
        gx = gw = gb = None
        if weight.requires_grad:
            g2 = g3.transpose(1, 0, 2).reshape(c_out, n * oh * ow)
            c2 = cols.transpose(1, 0, 2).reshape(c_in * k * k, n * oh * ow)
            gw = (g2 @ c2.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g3)
            if pointwise:
                gx = dcols.reshape(x.shape)
            else:
                gx = _kernels.col2im(dcols, x.shape, k, stride, padding)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, parents, bw)


def maxpool2d(x, k=2, stride=2):
    """Non-overlapping max pooling; ties route gradient to the first index."""
    if k != stride:
        raise ValueError("maxpool2d: only non-overlapping windows (k == stride) are supported")
    n, c, h, w = x.shape
    if h % stride or w % stride:
        raise ValueError(f"maxpool2d: spatial dims {h}x{w} not divisible by stride {stride}")
    out, idx = _kernels.maxpool_fwd(x.data, k)
    shape = x.shape
    return _make(out, (x,), lambda g: (_kernels.maxpool_bwd(g, idx, shape, k),))


def upsample_bilinear(x, factor):
    """Bilinear upsampling by an integer factor (align_corners=False)."""
    if factor < 2:
        raise ValueError("upsample_bilinear: factor must be >= 2")
    if x.data.ndim != 4:
        raise ValueError(f"upsample_bilinear: expected NCHW input, got {x.shape}")
    out = _kernels.upsample_fwd(x.data, factor).astype(x.dtype, copy=False)
    shape = x.shape
    return _make(out, (x,), lambda g: (_kernels.upsample_bwd(g, factor, shape).astype(g.dtype, copy=False),))


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def cross_entropy_pixelwise(logits, labels, weights=None):
    """Summed per-pixel softmax cross-entropy.

    ``labels`` is an (n, h, w) integer array and ``weights`` an optional
    (n, h, w) non-negative array; the result is
    ``sum(weights * -log softmax(logits)[label])``.
    """
    if logits.data.ndim != 4:
        raise ValueError(f"cross_entropy_pixelwise: logits must be NCHW, got {logits.shape}")
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"cross_entropy_pixelwise: labels shape {labels.shape} != {(n, h, w)}")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        b, y, x = np.unravel_index(bad[0], labels.shape)
        raise ValueError(
            f"cross_entropy_pixelwise: label {labels[b, y, x]} at pixel (n={b}, y={y}, x={x}) "
            f"out of range for {c} classes"
        )
    if weights is None:
        weights = np.ones((n, h, w), dtype=logits.dtype)
    else:
        weights = np.asarray(weights)
        if weights.shape != (n, h, w):
            raise ValueError(f"cross_entropy_pixelwise: weights shape {weights.shape} != {(n, h, w)}")
        if np.any(weights < 0):
            raise ValueError("cross_entropy_pixelwise: weights must be non-negative")
    loss, grad = _kernels.softmax_xent(logits.data, labels, weights)
    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), lambda g: (grad * g,))


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

def topo_order(root):
    """Nodes reachable from ``root``, every node after all of its inputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents or ():
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` of every tensor in the graph that requires grad.

    Only leaves keep their gradient; it accumulates across calls. The
    recorded graph is released afterwards, so a second call on the same
    loss raises.
    """
    if loss.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any tensor requiring grad")
    if loss._parents is None:
        raise GraphError("backward: graph already consumed")
    order = topo_order(loss)
    grads = {id(loss): np.ones(loss.data.shape, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._backward = None
        node._parents = None
