"""Minimal reverse-mode autodiff over numpy arrays.

Every operation the segmentation model needs is implemented here as an
explicit function with a hand-written adjoint. There is no general
broadcasting: operands must share a shape exactly, except scalars, which
may combine with any tensor. Shape mixes beyond that are expressed with
explicit reshape/transpose/tile calls by the caller.

Volumes are laid out channels-first (C, D, H, W) throughout the package.
"""

from contextlib import contextmanager

import numpy as np
from scipy.special import expit, ndtr

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, cost matrices)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's shape rule."""


def _check(cond, op, *shapes):
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    """N-D array participating in the gradient tape.

    `data` is float64 by default (float32 is accepted and kept, for
    training speed); `grad` materializes lazily as zeros so parameters
    off the loss path still report an all-zero gradient.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents = ()
        self._backward = None

    # -- bookkeeping ------------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self):
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self):
        self._grad = None

    def detach(self):
        return Tensor(self.data)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data, inputs, grads_fn):
    """Wrap an op result; `grads_fn(g)` returns one gradient per input."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._parents = tuple(inputs)
        out._backward = grads_fn
    return out


def _accumulate(t, g):
    if t.requires_grad and g is not None:
        if t._grad is None:
            t._grad = np.zeros_like(t.data)
        t._grad += g


class Tape:
    """Topological ordering of the op graph reachable from a root tensor.

    Replaying `nodes` in reverse visits every recorded node exactly once
    with all downstream gradients already accumulated.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root):
        nodes = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(nodes)


def backward(loss):
    """Populate `grad` on every reachable requires_grad tensor.

    Repeated calls without zero_grad accumulate.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar-shaped, got {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.trace(loss)
    # Flow this pass's gradients in a local map so repeated backward calls
    # each contribute exactly one unit; persistent .grad only accumulates.
    flow = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        _accumulate(node, g)
        if node._backward is None:
            continue
        for parent, gp in zip(node._parents, node._backward(g)):
            if parent.requires_grad and gp is not None:
                key = id(parent)
                flow[key] = flow[key] + gp if key in flow else gp
    return tape


def _is_scalar(t):
    return t.size == 1


def _reduce_to(g, shape):
    """Collapse a gradient onto a (possibly scalar) operand shape."""
    if g.shape == shape:
        return g
    return g.sum().reshape(shape)


# -- arithmetic -----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape or _is_scalar(a) or _is_scalar(b), "add", a.shape, b.shape)

    def grads(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _from_op(a.data + b.data, (a, b), grads)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape or _is_scalar(a) or _is_scalar(b), "sub", a.shape, b.shape)

    def grads(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _from_op(a.data - b.data, (a, b), grads)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape or _is_scalar(a) or _is_scalar(b), "mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def grads(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _from_op(ad * bd, (a, b), grads)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape or _is_scalar(a) or _is_scalar(b), "div", a.shape, b.shape)
    ad, bd = a.data, b.data

    def grads(g):
        return _reduce_to(g / bd, a.shape), _reduce_to(-g * ad / (bd * bd), b.shape)

    return _from_op(ad / bd, (a, b), grads)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check(a.ndim >= 2 and b.ndim >= 2, "matmul", a.shape, b.shape)
    _check(a.shape[-1] == b.shape[-2] and a.shape[:-2] == b.shape[:-2],
           "matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def grads(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _from_op(ad @ bd, (a, b), grads)


def log(x):
    x = as_tensor(x)
    xd = x.data

    def grads(g):
        return (g / xd,)

    return _from_op(np.log(xd), (x,), grads)


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)

    def grads(g):
        return (g * y,)

    return _from_op(y, (x,), grads)


def sin(x):
    x = as_tensor(x)
    xd = x.data

    def grads(g):
        return (g * np.cos(xd),)

    return _from_op(np.sin(xd), (x,), grads)


def cos(x):
    x = as_tensor(x)
    xd = x.data

    def grads(g):
        return (-g * np.sin(xd),)

    return _from_op(np.cos(xd), (x,), grads)


def abs_(x):
    x = as_tensor(x)
    xd = x.data

    def grads(g):
        return (g * np.sign(xd),)

    return _from_op(np.abs(xd), (x,), grads)


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape or _is_scalar(a) or _is_scalar(b), "minimum", a.shape, b.shape)
    take_a = a.data <= b.data

    def grads(g):
        return _reduce_to(g * take_a, a.shape), _reduce_to(g * ~take_a, b.shape)

    return _from_op(np.minimum(a.data, b.data), (a, b), grads)


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape or _is_scalar(a) or _is_scalar(b), "maximum", a.shape, b.shape)
    take_a = a.data >= b.data

    def grads(g):
        return _reduce_to(g * take_a, a.shape), _reduce_to(g * ~take_a, b.shape)

    return _from_op(np.maximum(a.data, b.data), (a, b), grads)


# -- shape ops ------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    new = np.reshape(x.data, shape)
    old_shape = x.shape

    def grads(g):
        return (g.reshape(old_shape),)

    return _from_op(new, (x,), grads)


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)

    def grads(g):
        return (np.transpose(g, inv),)

    return _from_op(np.transpose(x.data, axes), (x,), grads)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        _check(t.ndim == len(ref)
               and all(t.shape[i] == ref[i] for i in range(t.ndim) if i != axis % t.ndim),
               "concat", ref, t.shape)
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grads(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grads)


def slice_(x, key):
    x = as_tensor(x)
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if isinstance(k, slice) and k.step not in (None, 1):
            raise ShapeError("slice: only unit steps are supported")
    shape = x.shape
    out_data = x.data[key]

    def grads(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[key] = g
        return (gx,)

    return _from_op(out_data, (x,), grads)


def tile(x, reps):
    """np.tile with per-axis repetition counts; adjoint sums the copies."""
    x = as_tensor(x)
    reps = tuple(reps)
    _check(len(reps) == x.ndim, "tile", x.shape, reps)
    shape = x.shape

    def grads(g):
        inter = []
        for r, s in zip(reps, shape):
            inter.extend((r, s))
        return (g.reshape(inter).sum(axis=tuple(range(0, 2 * len(shape), 2))),)

    return _from_op(np.tile(x.data, reps), (x,), grads)


# -- reductions -----------------------------------------------------------

def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def grads(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, shape).copy(),)

    return _from_op(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), grads)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        n = x.size
    else:
        n = np.prod([shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])

    def grads(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk / n, shape).copy(),)

    return _from_op(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), grads)


def max_project(x, axis):
    """Max over one axis; gradient flows to the first argmax per fiber."""
    x = as_tensor(x)
    xd = x.data
    idx = np.argmax(xd, axis=axis)
    out = np.max(xd, axis=axis)

    def grads(g):
        gx = np.zeros_like(xd)
        sel = np.expand_dims(idx, axis)
        np.put_along_axis(gx, sel, np.expand_dims(g, axis), axis)
        return (gx,)

    return _from_op(out, (x,), grads)


# -- nonlinearities -------------------------------------------------------

def sigmoid(x):
    x = as_tensor(x)
    y = expit(x.data)

    def grads(g):
        return (g * y * (1.0 - y),)

    return _from_op(y, (x,), grads)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def grads(g):
        return (g * mask,)

    return _from_op(np.maximum(x.data, 0), (x,), grads)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact GELU x * Phi(x)."""
    x = as_tensor(x)
    xd = x.data
    cdf = ndtr(xd)

    def grads(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return _from_op(xd * cdf, (x,), grads)


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def grads(g):
        gy = g * y
        return (gy - y * np.sum(gy, axis=axis, keepdims=True),)

    return _from_op(y, (x,), grads)


def layernorm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis; gamma/beta are 1-D of that extent."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check(gamma.shape == (x.shape[-1],) and beta.shape == (x.shape[-1],),
           "layernorm", x.shape, gamma.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data

    def grads(g):
        gg = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        gb = g.reshape(-1, xd.shape[-1]).sum(axis=0)
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _from_op(xhat * gd + beta.data, (x, gamma, beta), grads)


def linear(x, weight, bias=None):
    """x (..., K) @ weight (O, K)^T + bias (O)."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check(x.shape[-1] == weight.shape[-1], "linear", x.shape, weight.shape)
    xd, wd = x.data, weight.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        _check(bias.shape == (weight.shape[0],), "linear", bias.shape, weight.shape)
        out = out + bias.data
        inputs.append(bias)
    out = out.reshape(xd.shape[:-1] + (wd.shape[0],))

    def grads(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _from_op(out, tuple(inputs), grads)


# -- convolution and resampling -------------------------------------------

def _spatial3(x, op):
    """Return (batched_view, had_batch) with x normalized to 5-D (B,C,D,H,W)."""
    if x.ndim == 4:
        return x[None], False
    if x.ndim == 5:
        return x, True
    raise ShapeError(f"{op}: expected (C,D,H,W) or (B,C,D,H,W), got {x.shape}")


def conv3d(x, weight, bias=None, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Cross-correlation; x (.., C, D, H, W), weight (O, C, kd, kh, kw).

    Implemented as im2col + GEMM so the heavy lifting stays in BLAS.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    xb, had_batch = _spatial3(x.data, "conv3d")
    wd = weight.data
    _check(wd.ndim == 5 and wd.shape[1] == xb.shape[1], "conv3d", x.shape, weight.shape)
    sd, sh, sw = stride
    pd, ph, pw = padding
    o = wd.shape[0]
    kd, kh, kw = wd.shape[2:]
    xp = np.pad(xb, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    for ext, k in zip(xp.shape[2:], (kd, kh, kw)):
        _check(ext >= k, "conv3d", x.shape, weight.shape)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw]
    b = xb.shape[0]
    do, ho, wo = win.shape[2:5]
    # columns: (B, Do, Ho, Wo, C, kd, kh, kw) flattened for one big matmul
    col = np.ascontiguousarray(np.moveaxis(win, 1, 4)).reshape(b * do * ho * wo, -1)
    wmat = wd.reshape(o, -1)
    out = (col @ wmat.T).reshape(b, do, ho, wo, o)
    out = np.moveaxis(out, 4, 1)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        _check(bias.shape == (o,), "conv3d", bias.shape, weight.shape)
        out = out + bias.data[None, :, None, None, None]
        inputs.append(bias)
    xp_shape = xp.shape

    def grads(g):
        gb5 = g if had_batch else g[None]
        g2 = np.moveaxis(gb5, 1, 4).reshape(-1, o)
        gw = (g2.T @ col).reshape(wd.shape)
        gcol = (g2 @ wmat).reshape(b, do, ho, wo, xb.shape[1], kd, kh, kw)
        gxp = np.zeros(xp_shape)
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    patch = np.moveaxis(gcol[..., i, j, k], 4, 1)
                    gxp[:, :, i:i + sd * do:sd, j:j + sh * ho:sh, k:k + sw * wo:sw] += patch
        gx = gxp[:, :, pd:xp_shape[2] - pd, ph:xp_shape[3] - ph, pw:xp_shape[4] - pw]
        gx = gx if had_batch else gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, gb5.sum(axis=(0, 2, 3, 4))

    out = out if had_batch else out[0]
    return _from_op(out, tuple(inputs), grads)


def depthwise_conv3d(x, weight, bias=None, padding=(0, 0, 0)):
    """Per-channel 3-D convolution; weight (C, kd, kh, kw), stride 1."""
    x, weight = as_tensor(x), as_tensor(weight)
    xb, had_batch = _spatial3(x.data, "depthwise_conv3d")
    wd = weight.data
    _check(wd.ndim == 4 and wd.shape[0] == xb.shape[1], "depthwise_conv3d", x.shape, weight.shape)
    kd, kh, kw = wd.shape[1:]
    pd, ph, pw = padding
    xp = np.pad(xb, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    do = xp.shape[2] - kd + 1
    ho = xp.shape[3] - kh + 1
    wo = xp.shape[4] - kw + 1
    _check(do >= 1 and ho >= 1 and wo >= 1, "depthwise_conv3d", x.shape, weight.shape)
    out = np.zeros((xb.shape[0], xb.shape[1], do, ho, wo))
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                out += wd[None, :, i, j, k, None, None, None] * \
                    xp[:, :, i:i + do, j:j + ho, k:k + wo]
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        _check(bias.shape == (wd.shape[0],), "depthwise_conv3d", bias.shape, weight.shape)
        out = out + bias.data[None, :, None, None, None]
        inputs.append(bias)
    xp_shape = xp.shape

    def grads(g):
        gb5 = g if had_batch else g[None]
        gw = np.zeros_like(wd)
        gxp = np.zeros(xp_shape)
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    win = xp[:, :, i:i + do, j:j + ho, k:k + wo]
                    gw[:, i, j, k] = (gb5 * win).sum(axis=(0, 2, 3, 4))
                    gxp[:, :, i:i + do, j:j + ho, k:k + wo] += \
                        gb5 * wd[None, :, i, j, k, None, None, None]
        gx = gxp[:, :, pd:xp_shape[2] - pd, ph:xp_shape[3] - ph, pw:xp_shape[4] - pw]
        gx = gx if had_batch else gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, gb5.sum(axis=(0, 2, 3, 4))

    out = out if had_batch else out[0]
    return _from_op(out, tuple(inputs), grads)


def conv_transpose3d(x, weight, bias=None, stride=(1, 2, 2)):
    """Transposed conv with kernel == stride (non-overlapping upsampling).

    x (.., C, D, H, W), weight (C, O, sd, sh, sw) -> (.., O, D*sd, H*sh, W*sw).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    xb, had_batch = _spatial3(x.data, "conv_transpose3d")
    wd = weight.data
    sd, sh, sw = stride
    _check(wd.ndim == 5 and wd.shape[0] == xb.shape[1] and wd.shape[2:] == (sd, sh, sw),
           "conv_transpose3d", x.shape, weight.shape)
    b, c, d, h, w = xb.shape
    o = wd.shape[1]
    # (B,C,D,H,W) x (C,O,sd,sh,sw) -> (B,D,H,W,O,sd,sh,sw), interleave strides
    out = np.tensordot(xb, wd, axes=([1], [0]))
    out = np.transpose(out, (0, 4, 1, 5, 2, 6, 3, 7)).reshape(b, o, d * sd, h * sh, w * sw)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        _check(bias.shape == (o,), "conv_transpose3d", bias.shape, weight.shape)
        out = out + bias.data[None, :, None, None, None]
        inputs.append(bias)

    def grads(g):
        gb5 = g if had_batch else g[None]
        g8 = gb5.reshape(b, o, d, sd, h, sh, w, sw)
        g8 = np.ascontiguousarray(np.transpose(g8, (0, 2, 4, 6, 1, 3, 5, 7)))
        gx = np.tensordot(g8, wd, axes=([4, 5, 6, 7], [1, 2, 3, 4]))
        gx = np.moveaxis(gx, 4, 1)
        gw = np.tensordot(xb, g8, axes=([0, 2, 3, 4], [0, 1, 2, 3]))
        gx = gx if had_batch else gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, gb5.sum(axis=(0, 2, 3, 4))

    out = out if had_batch else out[0]
    return _from_op(out, tuple(inputs), grads)


def upsample_nearest3d(x, factors):
    """Integer nearest-neighbour upsampling of the three spatial axes."""
    x = as_tensor(x)
    xb, had_batch = _spatial3(x.data, "upsample_nearest3d")
    fd, fh, fw = factors
    out = xb.repeat(fd, axis=2).repeat(fh, axis=3).repeat(fw, axis=4)
    b, c, d, h, w = xb.shape

    def grads(g):
        gb5 = g if had_batch else g[None]
        gx = gb5.reshape(b, c, d, fd, h, fh, w, fw).sum(axis=(3, 5, 7))
        return (gx if had_batch else gx[0],)

    return _from_op(out if had_batch else out[0], (x,), grads)


def _linresize_plan(in_len, out_len):
    # Half-pixel-centre source positions, clamped (edge replication).
    pos = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    pos = np.clip(pos, 0, in_len - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, in_len - 1)
    w = pos - lo
    return lo, hi, w


def upsample_trilinear3d(x, size):
    """Resize spatial axes to `size` (D, H, W) with linear interpolation."""
    x = as_tensor(x)
    xb, had_batch = _spatial3(x.data, "upsample_trilinear3d")
    plans = []
    out = xb
    for ax, out_len in zip((2, 3, 4), size):
        in_len = out.shape[ax]
        if in_len == out_len:
            plans.append(None)
            continue
        lo, hi, w = _linresize_plan(in_len, out_len)
        plans.append((in_len, lo, hi, w))
        wexp = np.expand_dims(w, tuple(i for i in range(out.ndim) if i != ax))
        out = np.take(out, lo, axis=ax) * (1.0 - wexp) + np.take(out, hi, axis=ax) * wexp

    def grads(g):
        gx = g if had_batch else g[None]
        for ax, plan in zip((4, 3, 2), reversed(plans)):
            if plan is None:
                continue
            in_len, lo, hi, w = plan
            wexp = np.expand_dims(w, tuple(i for i in range(gx.ndim) if i != ax))
            acc = np.zeros(gx.shape[:ax] + (in_len,) + gx.shape[ax + 1:])
            mv_acc = np.moveaxis(acc, ax, 0)
            mv_lo = np.moveaxis(gx * (1.0 - wexp), ax, 0)
            mv_hi = np.moveaxis(gx * wexp, ax, 0)
            np.add.at(mv_acc, lo, mv_lo)
            np.add.at(mv_acc, hi, mv_hi)
            gx = acc
        return (gx if had_batch else gx[0],)

    return _from_op(out if had_batch else out[0], (x,), grads)


def adaptive_avg_pool(x, out_sizes):
    """Average-pool trailing spatial axes into `out_sizes` contiguous bins.

    Each axis is split into bins whose sizes differ by at most one voxel.
    Input is (C, *spatial) or (B, C, *spatial) with len(spatial) == len(out_sizes).
    """
    x = as_tensor(x)
    nsp = len(out_sizes)
    _check(x.ndim in (nsp + 1, nsp + 2), "adaptive_avg_pool", x.shape, out_sizes)
    lead = x.ndim - nsp
    out = x.data
    plans = []
    for i, out_len in enumerate(out_sizes):
        ax = lead + i
        in_len = out.shape[ax]
        _check(1 <= out_len <= in_len, "adaptive_avg_pool", x.shape, out_sizes)
        starts = (np.arange(out_len) * in_len) // out_len
        ends = (np.arange(1, out_len + 1) * in_len) // out_len
        counts = ends - starts
        sums = np.add.reduceat(out, starts, axis=ax)
        shape = [1] * out.ndim
        shape[ax] = out_len
        out = sums / counts.reshape(shape)
        plans.append((ax, counts))

    def grads(g):
        gx = g
        for ax, counts in reversed(plans):
            shape = [1] * gx.ndim
            shape[ax] = len(counts)
            gx = np.repeat(gx / counts.reshape(shape), counts, axis=ax)
        return (gx,)

    return _from_op(out, (x,), grads)


# -- gradient checking ----------------------------------------------------

class GradCheckReport:
    """Per-element comparison of tape gradients with central differences."""

    def __init__(self, analytic, numeric, rel_err, tol, nonfinite):
        self.analytic = analytic
        self.numeric = numeric
        self.rel_err = rel_err
        self.max_rel_err = float(np.max(rel_err)) if rel_err.size else 0.0
        self.tol = tol
        self.nonfinite = nonfinite
        self.passed = (not nonfinite) and self.max_rel_err < tol

    def __repr__(self):
        return (f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, tol={self.tol:.1e}, "
                f"passed={self.passed}, nonfinite={self.nonfinite})")


def grad_check(f, x, h=1e-5, tol=1e-4):
    """Compare tape gradient of scalar-valued `f` at `x` against central
    finite differences (f(x+h)-f(x-h))/2h, elementwise.

    Relative error uses denominator max(|a|, |b|, 1e-8). Non-finite values
    anywhere are reported, never silently passed.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got {out.shape}")
    backward(out)
    analytic = probe.grad.copy()
    nonfinite = not np.isfinite(out.data).all()

    numeric, fd_nonfinite = _central_differences(lambda: f(probe).item(), probe, h)
    nonfinite |= fd_nonfinite or not np.isfinite(analytic).all()
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel_err = np.abs(analytic - numeric) / denom
    return GradCheckReport(analytic, numeric, rel_err, tol, nonfinite)


def _central_differences(eval_fn, tensor, h, indices=None):
    flat = tensor.data.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    numeric = np.zeros_like(flat)
    nonfinite = False
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            fp = eval_fn()
            flat[i] = orig - h
            fm = eval_fn()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                nonfinite = True
            numeric[i] = (fp - fm) / (2.0 * h)
    return numeric.reshape(tensor.shape), nonfinite


def grad_check_param(loss_fn, param, h=1e-5, tol=1e-4, sample=None, rng=None):
    """grad_check for a parameter inside a model: `loss_fn()` rebuilds the
    scalar loss from current parameter values.

    `sample` limits the finite-difference probe to that many elements
    (drawn with `rng`); the analytic gradient is still full.
    """
    param.zero_grad()
    out = loss_fn()
    if out.size != 1:
        raise ShapeError(f"grad_check_param: loss must be scalar, got {out.shape}")
    backward(out)
    analytic = param.grad.copy()
    nonfinite = not np.isfinite(out.data).all()

    if sample is not None and sample < param.size:
        chooser = rng or np.random.default_rng(0)
        indices = chooser.choice(param.size, size=sample, replace=False)
    else:
        indices = np.arange(param.size)
    numeric, fd_nonfinite = _central_differences(lambda: loss_fn().item(), param, h, indices)
    nonfinite |= fd_nonfinite or not np.isfinite(analytic).all()
    a = analytic.reshape(-1)[indices]
    n = numeric.reshape(-1)[indices]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    rel_err = np.abs(a - n) / denom
    return GradCheckReport(analytic, numeric, rel_err, tol, nonfinite)
