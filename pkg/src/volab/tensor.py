"""Dense-tensor engine with reverse-mode automatic differentiation.

Values are numpy arrays, float32 by default. Build leaves with
``dtype=np.float64`` for gradient checking. Broadcasting is limited to
suffix alignment: operand shapes must be equal, scalar, or one shape must
be a suffix of the other. Every primitive checks its output for NaN/Inf.
"""

from __future__ import annotations

import struct
import weakref

import numpy as np
from scipy.special import erf as _erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are invalid for the requested primitive."""


class NumericError(ArithmeticError):
    """A primitive produced NaN/Inf or violated a numeric precondition."""


class Node:
    """One recorded primitive application.

    The output is held weakly: a strong reference would close a reference
    cycle (tensor -> node -> tensor) that defers every intermediate buffer
    to the cyclic collector and balloons training memory. During backward
    each node's output is pinned anyway, by the root argument or by a
    consumer's ``inputs`` list."""

    __slots__ = ("op", "inputs", "vjp", "_out_ref")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self._out_ref = weakref.ref(output)

    @property
    def output(self):
        return self._out_ref()


class Tensor:
    """Immutable-by-convention dense array node in the computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
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

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; scalars become constant operands
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not a primitive; "
                             "multiply by a reciprocal instead")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)


class Tape:
    """Primitive applications reachable from an output, in topological order."""

    def __init__(self, nodes):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def trace(cls, output: Tensor) -> "Tape":
        nodes = []
        seen = set()
        # iterative post-order DFS over tensors that carry a node
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            if expanded:
                seen.add(id(t))
                nodes.append(t.node)
            else:
                stack.append((t, True))
                for parent in t.node.inputs:
                    if parent.node is not None and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(nodes)


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every requires_grad leaf.

    The output must be a scalar (size 1). Gradients add across fan-out and
    across repeated backward calls (callers zero ``.grad`` between steps).
    """
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise ShapeError("output is detached from every requires_grad leaf")
    grads = {id(output): np.ones_like(output.data)}
    holders = {id(output): output}

    def _leaf_accumulate(t, g):
        if t.grad is None:
            t.grad = g.astype(t.data.dtype, copy=True)
        else:
            t.grad = t.grad + g

    if output.node is None:
        _leaf_accumulate(output, grads[id(output)])
        return
    tape = Tape.trace(output)
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        holders.pop(id(node.output), None)
        if g is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is None:
                _leaf_accumulate(parent, pg)
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    holders[key] = parent


def _finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by '{op}'")
    return arr


def _make(op, out_data, inputs, vjp):
    out = Tensor.__new__(Tensor)
    out.data = _finite(out_data, op)
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    out.node = Node(op, inputs, out, vjp) if out.requires_grad else None
    return out


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _check_suffix_broadcast(a_shape, b_shape, op):
    """Allow equal shapes, scalars, or one shape being a suffix of the other."""
    if a_shape == b_shape:
        return
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if small == () or big[len(big) - len(small):] == small:
        return
    raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} are not suffix-broadcastable")


def _reduce_to_shape(g, shape):
    # sum gradient over leading broadcast axes
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives


def add(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_suffix_broadcast(a.shape, b.shape, "add")
    out = a.data + b.data

    def vjp(g):
        return _reduce_to_shape(g, a.shape), _reduce_to_shape(g, b.shape)

    return _make("add", out, (a, b), vjp)


def sub(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_suffix_broadcast(a.shape, b.shape, "sub")
    out = a.data - b.data

    def vjp(g):
        return _reduce_to_shape(g, a.shape), _reduce_to_shape(-g, b.shape)

    return _make("sub", out, (a, b), vjp)


def mul(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_suffix_broadcast(a.shape, b.shape, "mul")
    out = a.data * b.data

    def vjp(g):
        return (_reduce_to_shape(g * b.data, a.shape),
                _reduce_to_shape(g * a.data, b.shape))

    return _make("mul", out, (a, b), vjp)


def matmul(a, b):
    """Matrix product. Leading batch dims must match, or one operand is 2-D."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ShapeError("matmul takes two tensors")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ ({a.shape} @ {b.shape})")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ ({a.shape} @ {b.shape})")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _reduce_to_shape(ga, a.shape), _reduce_to_shape(gb, b.shape)

    return _make("matmul", out, (a, b), vjp)


def relu(x):
    out = np.maximum(x.data, 0)

    def vjp(g):
        return (g * (x.data > 0),)

    return _make("relu", out, (x,), vjp)


def gelu(x):
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    out = (x.data * cdf).astype(x.data.dtype)

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make("gelu", out, (x,), vjp)


def sigmoid(x):
    out = 1.0 / (1.0 + np.exp(-x.data))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (x,), vjp)


def tanh(x):
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make("tanh", out, (x,), vjp)


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis``; rows sum to one."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make("softmax", out, (x,), vjp)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale/shift per feature."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError("layer_norm: gamma/beta must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gx_hat = g * gamma.data
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gx_hat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make("layer_norm", out, (x, gamma, beta), vjp)


def batch_norm(x, gamma, beta, axes=None, eps=1e-5, stats=None):
    """Channel-axis-1 batch normalization.

    Training form computes biased statistics over ``axes`` (default: all but
    axis 1) and differentiates through them. Pass ``stats=(mean, var)`` for
    the inference form with frozen statistics.
    """
    if x.ndim < 2:
        raise ShapeError("batch_norm expects (N, C, ...) input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm: gamma/beta must have shape (channels,)")
    if axes is None:
        axes = (0,) + tuple(range(2, x.ndim))
    cshape = (1, c) + (1,) * (x.ndim - 2)
    gam = gamma.data.reshape(cshape)
    bet = beta.data.reshape(cshape)

    if stats is not None:
        mu = np.asarray(stats[0], dtype=x.data.dtype).reshape(cshape)
        var = np.asarray(stats[1], dtype=x.data.dtype).reshape(cshape)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        out = xhat * gam + bet

        def vjp(g):
            return (g * gam * inv,
                    (g * xhat).sum(axis=axes),
                    g.sum(axis=axes))

        return _make("batch_norm", out, (x, gamma, beta), vjp)

    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gam + bet

    def vjp(g):
        gx_hat = g * gam
        m1 = gx_hat.mean(axis=axes, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=axes, keepdims=True)
        gx = inv * (gx_hat - m1 - xhat * m2)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make("batch_norm", out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# shape and reduction primitives


def reshape(x, shape):
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _make("reshape", out, (x,), vjp)


def transpose(x, axes):
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _make("transpose", out, (x,), vjp)


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make("concat", out, tensors, vjp)


def narrow(x, axis, start, length):
    """Contiguous slice along one axis (the engine's `slice` primitive)."""
    n = x.shape[axis]
    if start < 0 or length < 0 or start + length > n:
        raise ShapeError(f"narrow: [{start}:{start + length}] outside axis of size {n}")
    key = tuple(slice(None) if a != axis else slice(start, start + length)
                for a in range(x.ndim))
    out = x.data[key]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _make("slice", out, (x,), vjp)


def roll(x, shift, axes):
    shift = tuple(shift)
    axes = tuple(axes)
    out = np.roll(x.data, shift, axis=axes)

    def vjp(g):
        return (np.roll(g, tuple(-s for s in shift), axis=axes),)

    return _make("roll", out, (x,), vjp)


def take(x, indices, axis=0):
    """Gather rows along ``axis``; backward scatter-adds."""
    idx = np.asarray(indices)
    out = np.take(x.data, idx, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None),) * axis + (idx,), g)
        return (gx,)

    return _make("take", out, (x,), vjp)


def expand_batch(x, n):
    """Insert a leading axis of size ``n`` by repetition."""
    out = np.broadcast_to(x.data[None], (n,) + x.shape).copy()

    def vjp(g):
        return (g.sum(axis=0),)

    return _make("expand_batch", out, (x,), vjp)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            shape = list(x.shape)
            for a in axes:
                shape[a] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", out, (x,), vjp)


def mean(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            shape = list(x.shape)
            for a in axes:
                shape[a] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make("mean", out, (x,), vjp)


def dropout(x, p, rng, training=True):
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise NumericError(f"dropout rate {p} outside [0, 1)")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype)
    scale = 1.0 / (1.0 - p)
    out = x.data * keep * scale

    def vjp(g):
        return (g * keep * scale,)

    return _make("dropout", out, (x,), vjp)


# ---------------------------------------------------------------------------
# convolution and pooling


def _triple(v, name):
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ShapeError(f"{name} must be an int or length-3 tuple")
    return t


def conv3d(x, w, bias=None, stride=1, padding=0):
    """3-D cross-correlation on NCDHW input with OIKdKhKw kernels.

    Forward and backward run as one im2col matmul each; the input gradient
    scatter-adds column gradients back through the kernel footprint.
    """
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError("conv3d expects (N,C,D,H,W) input and (O,I,kd,kh,kw) kernel")
    n, c, d, h, wd = x.shape
    o, ci, kd, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv3d: input has {c} channels, kernel expects {ci}")
    pd, ph, pw = padding
    sd, sh, sw = stride
    dp, hp, wp = d + 2 * pd, h + 2 * ph, wd + 2 * pw
    if kd > dp or kh > hp or kw > wp:
        raise ShapeError("conv3d: kernel larger than padded input")
    do = (dp - kd) // sd + 1
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    cols = np.empty((n, c, kd, kh, kw, do, ho, wo), dtype=x.data.dtype)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                cols[:, :, i, j, k] = xp[:, :,
                                         i:i + do * sd:sd,
                                         j:j + ho * sh:sh,
                                         k:k + wo * sw:sw]
    cols_mat = cols.reshape(n, c * kd * kh * kw, do * ho * wo)
    w_mat = w.data.reshape(o, c * kd * kh * kw)
    out = np.matmul(w_mat[None], cols_mat).reshape(n, o, do, ho, wo)
    if bias is not None:
        if bias.shape != (o,):
            raise ShapeError("conv3d: bias must have shape (out_channels,)")
        out = out + bias.data.reshape(1, o, 1, 1, 1)

    def vjp(g):
        g_mat = g.reshape(n, o, do * ho * wo)
        gw = np.einsum("nol,nkl->ok", g_mat, cols_mat).reshape(w.shape)
        gcols = np.matmul(w_mat.T[None], g_mat).reshape(cols.shape)
        gxp = np.zeros_like(xp)
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    gxp[:, :,
                        i:i + do * sd:sd,
                        j:j + ho * sh:sh,
                        k:k + wo * sw:sw] += gcols[:, :, i, j, k]
        gx = gxp[:, :, pd:pd + d, ph:ph + h, pw:pw + wd]
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        if bias is not None:
            return gx, gw, gb
        return gx, gw

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make("conv3d", out, inputs, vjp)


def conv2d(x, w, bias=None, stride=1, padding=0):
    """2-D convolution routed through conv3d with a singleton depth axis."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects (N,C,H,W) input and (O,I,kh,kw) kernel")
    if isinstance(stride, int):
        stride = (stride, stride)
    if isinstance(padding, int):
        padding = (padding, padding)
    x3 = reshape(x, (x.shape[0], x.shape[1], 1) + x.shape[2:])
    w3 = reshape(w, (w.shape[0], w.shape[1], 1) + w.shape[2:])
    out = conv3d(x3, w3, bias=bias, stride=(1,) + tuple(stride),
                 padding=(0,) + tuple(padding))
    return reshape(out, (out.shape[0], out.shape[1]) + out.shape[3:])


def pool3d(x, kind="max", window=2, stride=None):
    """Max or average pooling over NCDHW input. The window must fit the input."""
    if kind not in ("max", "avg"):
        raise ShapeError(f"pool3d kind must be max|avg, got {kind!r}")
    window = _triple(window, "window")
    stride = window if stride is None else _triple(stride, "stride")
    if x.ndim != 5:
        raise ShapeError("pool3d expects (N,C,D,H,W) input")
    n, c, d, h, w = x.shape
    wd, wh, ww = window
    sd, sh, sw = stride
    if wd > d or wh > h or ww > w:
        raise ShapeError("pool3d: window larger than input")
    do = (d - wd) // sd + 1
    ho = (h - wh) // sh + 1
    wo = (w - ww) // sw + 1

    cols = np.empty((n, c, wd, wh, ww, do, ho, wo), dtype=x.data.dtype)
    for i in range(wd):
        for j in range(wh):
            for k in range(ww):
                cols[:, :, i, j, k] = x.data[:, :,
                                             i:i + do * sd:sd,
                                             j:j + ho * sh:sh,
                                             k:k + wo * sw:sw]
    flat = cols.reshape(n, c, wd * wh * ww, do, ho, wo)

    if kind == "max":
        arg = flat.argmax(axis=2)
        out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]

        def vjp(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, arg[:, :, None], g[:, :, None], axis=2)
            gcols = gflat.reshape(cols.shape)
            gx = np.zeros_like(x.data)
            for i in range(wd):
                for j in range(wh):
                    for k in range(ww):
                        gx[:, :,
                           i:i + do * sd:sd,
                           j:j + ho * sh:sh,
                           k:k + wo * sw:sw] += gcols[:, :, i, j, k]
            return (gx,)

    else:
        count = wd * wh * ww
        out = flat.mean(axis=2)

        def vjp(g):
            share = g / count
            gx = np.zeros_like(x.data)
            for i in range(wd):
                for j in range(wh):
                    for k in range(ww):
                        gx[:, :,
                           i:i + do * sd:sd,
                           j:j + ho * sh:sh,
                           k:k + wo * sw:sw] += share
            return (gx,)

    return _make("pool3d", out, (x,), vjp)


def pool2d(x, kind="max", window=2, stride=None):
    """2-D pooling routed through pool3d with a singleton depth axis."""
    if x.ndim != 4:
        raise ShapeError("pool2d expects (N,C,H,W) input")
    if isinstance(window, int):
        window = (window, window)
    if stride is None:
        stride = window
    elif isinstance(stride, int):
        stride = (stride, stride)
    x3 = reshape(x, (x.shape[0], x.shape[1], 1) + x.shape[2:])
    out = pool3d(x3, kind=kind, window=(1,) + tuple(window),
                 stride=(1,) + tuple(stride))
    return reshape(out, (out.shape[0], out.shape[1]) + out.shape[3:])


# named registry of the engine's differentiable primitives
PRIMITIVES = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "relu": relu,
    "gelu": gelu,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "slice": narrow,
    "mean": mean,
    "batch_norm": batch_norm,
    "conv3d": conv3d,
    "pool3d": pool3d,
}


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, xs, eps=1e-5, sample=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a pure function of the given tensors returning a scalar
    Tensor. Inputs are promoted to float64 leaves. ``sample`` caps the number
    of coordinates checked per input (seeded subsample); default checks all.
    Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    leaves = []
    for x in xs:
        arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        leaves.append(Tensor(arr.copy(), requires_grad=True, dtype=np.float64))

    out = f(*leaves)
    if out.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    for leaf in leaves:
        leaf.grad = None
    backward(out)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        n = flat.size
        coords = np.arange(n)
        if sample is not None and sample < n:
            coords = rng.choice(n, size=sample, replace=False)
        aflat = analytic.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(*leaves).data.reshape(()))
            flat[i] = orig - eps
            f_minus = float(f(*leaves).data.reshape(()))
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint serialization

CHECKPOINT_MAGIC = b"VLCK"


def save_checkpoint(path, params):
    """Write named float32 arrays: magic, count, then per entry
    (name length, name bytes, rank, dims, little-endian float32 data)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            if data.ndim:
                fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into an ordered {name: float32 array} dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    off = 4
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        params[name] = arr.copy()
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    return params
