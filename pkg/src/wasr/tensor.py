"""Dense float64 tensors with reverse-mode automatic differentiation.

Feature maps are laid out channels-first (C, H, W) in row-major order.
Every op records a closure on its output; backward() runs them in reverse
topological order and accumulates gradients into .grad. Everything is
double precision and deterministic: same inputs, bit-identical outputs.

Convolution is im2col + matmul, pooling and resizing use strided views;
index arrays for the scatter passes are cached per geometry, which keeps
repeated forward/backward passes over fixed-shape networks cheap.
"""

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractViolation

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense float64 value grid with an optional gradient slot.

    Data is immutable by convention once the tensor participates in a
    graph; only .grad accumulates. A graph may be backward()-ed once.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_spent")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d to shape (1,); keep true scalars
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward_fn):
    """Build an op output, recording the graph only when it matters."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss):
    """Populate .grad on every requires_grad tensor reachable from loss.

    Gradients accumulate (sum) across fan-out. The recorded graph is
    consumable once; a second backward over it raises.
    """
    if loss.data.size != 1:
        raise ContractViolation(
            f"backward needs a scalar loss, got shape {loss.data.shape}"
        )
    if loss._spent:
        raise ContractViolation("graph already consumed by a previous backward")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._spent:
            raise ContractViolation("graph already consumed by a previous backward")
        if node._backward_fn is not None:
            node._backward_fn(node.grad)
            node._spent = True


# -- elementwise arithmetic (broadcasting) ------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))
    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))
    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
    return _make(a.data / b.data, (a, b), bw)


def power(a, exponent):
    a = _as_tensor(a)
    e = float(exponent)
    out_data = a.data ** e
    def bw(g):
        if e == 0.0:
            _accum(a, np.zeros_like(a.data))
        else:
            _accum(a, g * e * a.data ** (e - 1.0))
    return _make(out_data, (a,), bw)


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)
    def bw(g):
        _accum(a, g / (2.0 * out_data))
    return _make(out_data, (a,), bw)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    def bw(g):
        _accum(a, g * out_data)
    return _make(out_data, (a,), bw)


def log(a):
    a = _as_tensor(a)
    def bw(g):
        _accum(a, g / a.data)
    return _make(np.log(a.data), (a,), bw)


def maximum_scalar(a, floor):
    """Elementwise max(a, floor); at a tie the gradient goes to a."""
    a = _as_tensor(a)
    f = float(floor)
    keep = a.data >= f
    def bw(g):
        _accum(a, g * keep)
    return _make(np.maximum(a.data, f), (a,), bw)


# -- reductions and shape ------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    def bw(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())
    return _make(out_data, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = _as_tensor(a)
    def bw(g):
        _accum(a, g.reshape(a.data.shape))
    return _make(a.data.reshape(shape), (a,), bw)


# -- activations ---------------------------------------------------------

def activation(a, kind):
    """Elementwise nonlinearity, kind in {"relu", "sigmoid"}."""
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ContractViolation(f"unknown activation kind {kind!r}")


def relu(a):
    a = _as_tensor(a)
    keep = a.data > 0
    def bw(g):
        _accum(a, g * keep)
    return _make(a.data * keep, (a,), bw)


def sigmoid(a):
    a = _as_tensor(a)
    # tanh form avoids overflow for large negative inputs
    out_data = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    def bw(g):
        _accum(a, g * out_data * (1.0 - out_data))
    return _make(out_data, (a,), bw)


# -- gather / scatter ----------------------------------------------------

def take_flat(a, indices):
    """Pick elements of the flattened tensor; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    flat = a.data.reshape(-1)
    def bw(g):
        z = np.zeros(a.data.size)
        np.add.at(z, idx, g)
        _accum(a, z.reshape(a.data.shape))
    return _make(flat[idx], (a,), bw)


def gather_cols(a, indices):
    """Pick columns of a 2-D tensor: [C, P] -> [C, n]."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ContractViolation(f"gather_cols needs a 2-D tensor, got {a.data.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    def bw(g):
        z = np.zeros_like(a.data)
        np.add.at(z.T, idx, g.T)
        _accum(a, z)
    return _make(a.data[:, idx], (a,), bw)


# -- channel plumbing ----------------------------------------------------

def concat_channels(inputs):
    """Stack along the channel axis; spatial dims must match."""
    if len(inputs) < 2:
        raise ContractViolation("concat_channels needs at least 2 inputs")
    tensors = [_as_tensor(t) for t in inputs]
    spatial = tensors[0].data.shape[1:]
    for t in tensors:
        if t.data.shape[1:] != spatial:
            raise ContractViolation(
                f"concat_channels spatial mismatch: {t.data.shape} vs "
                f"{tensors[0].data.shape}"
            )
    counts = [t.data.shape[0] for t in tensors]
    offsets = np.cumsum([0] + counts)
    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, g[lo:hi])
    return _make(np.concatenate([t.data for t in tensors], axis=0), tensors, bw)


def slice_channels(a, start, stop):
    a = _as_tensor(a)
    def bw(g):
        z = np.zeros_like(a.data)
        z[start:stop] = g
        _accum(a, z)
    return _make(a.data[start:stop].copy(), (a,), bw)


# -- convolution ----------------------------------------------------------

_SCATTER_CACHE = {}


def same_padding(kernel, dilation=1):
    """Padding that preserves spatial dims at stride 1 for odd kernels."""
    if kernel % 2 == 0:
        raise ContractViolation(f"'same' padding needs an odd kernel, got {kernel}")
    return dilation * (kernel - 1) // 2


def _im2col(xp, kh, kw, stride, dilation, oh, ow):
    c, hp, wp = xp.shape
    sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(c, kh, kw, oh, ow),
        strides=(sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
    )
    return view.reshape(c * kh * kw, oh * ow)


def _col_scatter_indices(c, hp, wp, kh, kw, stride, dilation, oh, ow):
    """Flat indices into the padded input for every im2col column entry."""
    key = (c, hp, wp, kh, kw, stride, dilation)
    cached = _SCATTER_CACHE.get(key)
    if cached is None:
        ki = dilation * np.arange(kh)
        kj = dilation * np.arange(kw)
        oi = stride * np.arange(oh)
        oj = stride * np.arange(ow)
        rows = (ki[:, None] + oi[None, :])  # [kh, oh]
        cols = (kj[:, None] + oj[None, :])  # [kw, ow]
        # index layout mirrors _im2col's reshape: (c, kh, kw, oh, ow)
        lin = (
            np.arange(c)[:, None, None, None, None] * (hp * wp)
            + rows[None, :, None, :, None] * wp
            + cols[None, None, :, None, :]
        )
        cached = np.ascontiguousarray(lin.reshape(c * kh * kw, oh * ow))
        _SCATTER_CACHE[key] = cached
    return cached


def conv2d(x, weight, bias, stride=1, dilation=1, padding=0):
    """Cross-correlation of x[C,H,W] with weight[K,C,kh,kw] plus bias[K].

    H' = floor((H + 2p - dilation*(kh-1) - 1)/stride) + 1, same for W'.
    Differentiable in x, weight, and bias.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ContractViolation(
            f"conv2d expects x[C,H,W] and weight[K,C,kh,kw], got "
            f"{x.data.shape} and {weight.data.shape}"
        )
    c, h, w = x.data.shape
    k, cw, kh, kw = weight.data.shape
    if cw != c:
        raise ContractViolation(
            f"conv2d channel mismatch: input {x.data.shape} vs weight "
            f"{weight.data.shape}"
        )
    if bias.data.shape != (k,):
        raise ContractViolation(
            f"conv2d bias shape {bias.data.shape} does not match {k} kernels"
        )
    ph, pw = (padding, padding) if np.isscalar(padding) else padding
    oh = (h + 2 * ph - dilation * (kh - 1) - 1) // stride + 1
    ow = (w + 2 * pw - dilation * (kw - 1) - 1) // stride + 1
    if oh < 1 or ow < 1:
        raise ContractViolation(
            f"conv2d output would be empty for input {x.data.shape}, kernel "
            f"({kh},{kw}), stride {stride}, dilation {dilation}, padding {(ph, pw)}"
        )

    if ph or pw:
        xp = np.zeros((c, h + 2 * ph, w + 2 * pw))
        xp[:, ph:ph + h, pw:pw + w] = x.data
    else:
        xp = x.data
    hp, wp = xp.shape[1:]
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
    wmat = weight.data.reshape(k, c * kh * kw)
    out_data = (wmat @ cols + bias.data[:, None]).reshape(k, oh, ow)

    def bw(g):
        gm = g.reshape(k, oh * ow)
        _accum(bias, gm.sum(axis=1))
        _accum(weight, (gm @ cols.T).reshape(weight.data.shape))
        if x.requires_grad:
            gcols = wmat.T @ gm
            lin = _col_scatter_indices(c, hp, wp, kh, kw, stride, dilation, oh, ow)
            gp = np.bincount(
                lin.reshape(-1), weights=gcols.reshape(-1), minlength=c * hp * wp
            ).reshape(c, hp, wp)
            _accum(x, gp[:, ph:ph + h, pw:pw + w] if (ph or pw) else gp)

    return _make(out_data, (x, weight, bias), bw)


# -- pooling ---------------------------------------------------------------

def max_pool2d(x, window, stride):
    """Windowed max; the gradient routes to the lowest-linear-index argmax."""
    x = _as_tensor(x)
    c, h, w = x.data.shape
    if window < 1:
        raise ContractViolation(f"max_pool2d window must be >= 1, got {window}")
    if window > h or window > w:
        raise ContractViolation(
            f"max_pool2d window {window} exceeds input {x.data.shape}"
        )
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    sc, sh, sw = x.data.strides
    view = as_strided(
        x.data,
        shape=(c, oh, ow, window, window),
        strides=(sc, sh * stride, sw * stride, sh, sw),
    )
    patches = view.reshape(c, oh, ow, window * window)
    arg = patches.argmax(axis=3)  # first max wins: lowest linear index
    out_data = np.take_along_axis(patches, arg[..., None], axis=3)[..., 0]

    def bw(g):
        ki, kj = np.divmod(arg, window)
        rows = stride * np.arange(oh)[None, :, None] + ki
        colz = stride * np.arange(ow)[None, None, :] + kj
        lin = (np.arange(c)[:, None, None] * (h * w) + rows * w + colz)
        gx = np.bincount(
            lin.reshape(-1), weights=g.reshape(-1), minlength=c * h * w
        ).reshape(c, h, w)
        _accum(x, gx)

    return _make(np.ascontiguousarray(out_data), (x,), bw)


# -- resizing ---------------------------------------------------------------

_RESIZE_CACHE = {}


def _resize_axis_indices(n_in, n_out):
    key = (n_in, n_out)
    cached = _RESIZE_CACHE.get(key)
    if cached is None:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        t = src - i0
        cached = (i0, i1, t)
        _RESIZE_CACHE[key] = cached
    return cached


def resize_bilinear(x, out_h, out_w):
    """Align-corners-false bilinear resize of x[C,H,W]; differentiable."""
    x = _as_tensor(x)
    c, h, w = x.data.shape
    y0, y1, ty = _resize_axis_indices(h, out_h)
    x0, x1, tx = _resize_axis_indices(w, out_w)
    wy0, wy1 = (1.0 - ty)[:, None], ty[:, None]
    wx0, wx1 = (1.0 - tx)[None, :], tx[None, :]

    d = x.data
    out_data = (
        wy0 * (wx0 * d[:, y0][:, :, x0] + wx1 * d[:, y0][:, :, x1])
        + wy1 * (wx0 * d[:, y1][:, :, x0] + wx1 * d[:, y1][:, :, x1])
    )

    def bw(g):
        gx = np.zeros_like(d)
        for yi, wyv in ((y0, wy0), (y1, wy1)):
            for xi, wxv in ((x0, wx0), (x1, wx1)):
                contrib = g * (wyv * wxv)
                lin = (
                    np.arange(c)[:, None, None] * (h * w)
                    + yi[None, :, None] * w
                    + xi[None, None, :]
                )
                gx += np.bincount(
                    lin.reshape(-1), weights=contrib.reshape(-1), minlength=c * h * w
                ).reshape(c, h, w)
        _accum(x, gx)

    return _make(out_data, (x,), bw)


def upsample_bilinear(x, factor):
    """Upsample x[C,H,W] by an integer factor in {2, 4}."""
    if factor not in (2, 4):
        raise ContractViolation(f"upsample factor must be 2 or 4, got {factor}")
    x = _as_tensor(x)
    _, h, w = x.data.shape
    return resize_bilinear(x, factor * h, factor * w)


# -- normalization and heads -------------------------------------------------

class RunningStats:
    """Per-channel running mean/variance for eval-mode batch norm."""

    def __init__(self, channels):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def global_avg_pool(x):
    """Per-channel spatial mean: [C,H,W] -> [C,1,1]."""
    return tmean(x, axis=(1, 2), keepdims=True)


def batch_norm(x, scale, shift, running=None, mode="train", momentum=0.9, eps=1e-5):
    """Channel normalization of x[C,H,W] with learnable scale/shift.

    Train mode normalizes by the per-image channel statistics (this engine
    runs one image at a time) and, when `running` is given, folds them into
    the running stats with the given momentum. Eval mode normalizes by the
    running stats and requires them.
    """
    x, scale, shift = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    c = x.data.shape[0]
    scale_r = reshape(scale, (c, 1, 1))
    shift_r = reshape(shift, (c, 1, 1))
    if mode == "train":
        mean = tmean(x, axis=(1, 2), keepdims=True)
        centered = sub(x, mean)
        var = tmean(mul(centered, centered), axis=(1, 2), keepdims=True)
        if running is not None:
            running.mean = momentum * running.mean + (1 - momentum) * mean.data.reshape(c)
            running.var = momentum * running.var + (1 - momentum) * var.data.reshape(c)
        norm = div(centered, sqrt(add(var, eps)))
    elif mode == "eval":
        if running is None:
            raise ContractViolation("batch_norm eval mode needs running stats")
        rm = running.mean.reshape(c, 1, 1)
        rv = running.var.reshape(c, 1, 1)
        norm = div(sub(x, rm), np.sqrt(rv + eps))
    else:
        raise ContractViolation(f"batch_norm mode must be train or eval, got {mode!r}")
    return add(mul(norm, scale_r), shift_r)


def softmax_channels(x):
    """Per-pixel distribution over channels, stabilized by max-subtraction."""
    x = _as_tensor(x)
    if x.data.shape[0] < 2:
        raise ContractViolation(
            f"softmax_channels needs >= 2 channels, got {x.data.shape}"
        )
    m = x.data.max(axis=0, keepdims=True)  # constant shift, gradient unaffected
    e = exp(sub(x, m))
    return div(e, tsum(e, axis=0, keepdims=True))


# -- the independent gradient oracle -----------------------------------------

def finite_diff_grad(f, at, h=1e-5):
    """Central-difference gradient of a scalar function of one tensor."""
    def scalar(value):
        out = value.data
        if out.size != 1:
            raise ContractViolation(
                f"finite_diff_grad needs a scalar-valued function, got shape {out.shape}"
            )
        return float(out.reshape(()))

    base = np.array(at.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = scalar(f(Tensor(base)))
        flat[i] = orig - h
        f_minus = scalar(f(Tensor(base)))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return Tensor(grad)


def max_rel_error(analytic, numeric):
    """Max |a - n| normalized by the larger gradient magnitude."""
    a = analytic.data if isinstance(analytic, Tensor) else np.asarray(analytic)
    n = numeric.data if isinstance(numeric, Tensor) else np.asarray(numeric)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)
