"""Neural-network building blocks on top of the tensor engine.

Modules hold parameters as Tensor attributes and expose them through a
recursive attribute scan, so checkpointing and the optimizer never need
per-layer registration code. Everything here is written against the
suffix-broadcasting rules of the engine: any mask or bias that has to hit
an interior axis is reshaped so the add happens on a suffix.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    batch_norm,
    concat,
    conv2d,
    conv3d,
    dropout,
    gelu,
    layer_norm,
    matmul,
    mul,
    narrow,
    reshape,
    roll,
    sigmoid,
    softmax,
    take,
    tanh,
    transpose,
)


def _prod(xs):
    out = 1
    for x in xs:
        out *= int(x)
    return out


class Module:
    """Base class for layers: parameter discovery + train/eval switching."""

    def __init__(self):
        self.training = True

    def _children(self):
        for name in sorted(vars(self)):
            value = vars(self)[name]
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        """Depth-first (name, Tensor) pairs for every requires_grad Tensor
        attribute, in deterministic sorted-attribute order."""
        out = []
        for name in sorted(vars(self)):
            value = vars(self)[name]
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((full, value))
        for name, child in self._children():
            out.extend(child.named_parameters(prefix=f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix=""):
        """Non-trainable numpy state (e.g. batch-norm running stats)."""
        out = []
        buffers = getattr(self, "_buffers", {})
        for name in sorted(buffers):
            out.append((f"{prefix}{name}", buffers[name]))
        for name, child in self._children():
            out.extend(child.named_buffers(prefix=f"{prefix}{name}."))
        return out

    def set_training(self, flag):
        self.training = bool(flag)
        for _, child in self._children():
            child.set_training(flag)
        return self


def _normal(rng, shape, std, dtype):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype),
                  requires_grad=True)


class Linear(Module):
    def __init__(self, rng, in_dim, out_dim, bias=True, dtype=np.float32):
        super().__init__()
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        # fan-in scaled gaussian init keeps activation variance O(1)
        self.weight = _normal(rng, (in_dim, out_dim), 1.0 / math.sqrt(in_dim),
                              dtype)
        self.bias = (Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)
                     if bias else None)

    def __call__(self, x):
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = add(y, self.bias)
        return y


class Conv(Module):
    """2-D or 3-D convolution selected by the length of `kernel`."""

    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, padding=0,
                 bias=True, dtype=np.float32):
        super().__init__()
        kernel = tuple(int(k) for k in kernel)
        if len(kernel) not in (2, 3):
            raise ShapeError(f"conv kernel must be 2-D or 3-D, got {kernel}")
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * _prod(kernel)
        self.weight = _normal(rng, (out_ch, in_ch) + kernel,
                              1.0 / math.sqrt(fan_in), dtype)
        self.bias = (Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
                     if bias else None)

    def __call__(self, x):
        op = conv3d if len(self.kernel) == 3 else conv2d
        return op(x, self.weight, bias=self.bias, stride=self.stride,
                  padding=self.padding)


class BatchNorm(Module):
    """Batch norm over (batch, *spatial) with running statistics.

    Training uses batch statistics and differentiates through them; eval
    uses the stored running mean/var. Running var is the biased estimate,
    updated with momentum 0.1.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.channels = int(channels)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }

    def __call__(self, x):
        axes = (0,) + tuple(range(2, x.data.ndim))
        if self.training:
            batch_mean = x.data.mean(axis=axes)
            batch_var = x.data.var(axis=axes)
            m = self.momentum
            rb = self._buffers
            rb["running_mean"] = ((1 - m) * rb["running_mean"]
                                  + m * batch_mean).astype(x.data.dtype)
            rb["running_var"] = ((1 - m) * rb["running_var"]
                                 + m * batch_var).astype(x.data.dtype)
            return batch_norm(x, self.gamma, self.beta, axes=axes,
                              eps=self.eps)
        stats = (self._buffers["running_mean"], self._buffers["running_var"])
        return batch_norm(x, self.gamma, self.beta, axes=axes, eps=self.eps,
                          stats=stats)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.dim = int(dim)
        self.eps = float(eps)
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, eps=self.eps)


def sinusoid_positions(n_positions, dim, dtype=np.float32):
    """Fixed sin/cos position table of shape (n_positions, dim)."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / dim)
    table = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return table.astype(dtype)


def window_partition(x, window):
    """(N, g0..gk, D) -> (N * n_windows, window_len, D).

    Windows are raster-ordered: all windows of the first sample, then the
    next sample. Grid must be divisible by the window along every axis.
    """
    n = x.shape[0]
    d = x.shape[-1]
    grid = x.shape[1:-1]
    nd = len(grid)
    counts = []
    for g, w in zip(grid, window):
        if g % w != 0:
            raise ShapeError(f"grid {grid} not divisible by window "
                             f"{tuple(window)}")
        counts.append(g // w)
    shape = [n]
    for c, w in zip(counts, window):
        shape.extend([c, w])
    shape.append(d)
    x = reshape(x, tuple(shape))
    perm = ([0] + [1 + 2 * a for a in range(nd)]
            + [2 + 2 * a for a in range(nd)] + [2 * nd + 1])
    x = transpose(x, perm)
    return reshape(x, (n * _prod(counts), _prod(window), d)), tuple(counts)


def window_unpartition(x, window, counts, n):
    """Inverse of window_partition for a batch of n samples."""
    nd = len(window)
    d = x.shape[-1]
    x = reshape(x, (n,) + tuple(counts) + tuple(window) + (d,))
    perm = [0]
    for a in range(nd):
        perm.extend([1 + a, 1 + nd + a])
    perm.append(2 * nd + 1)
    x = transpose(x, perm)
    grid = tuple(c * w for c, w in zip(counts, window))
    return reshape(x, (n,) + grid + (d,))


def _partition_np(arr, window):
    """Numpy twin of window_partition for (*grid,) or (*grid, extra)."""
    extra = () if arr.ndim == len(window) else arr.shape[len(window):]
    grid = arr.shape[:len(window)]
    nd = len(window)
    counts = [g // w for g, w in zip(grid, window)]
    shape = []
    for c, w in zip(counts, window):
        shape.extend([c, w])
    arr = arr.reshape(tuple(shape) + extra)
    perm = ([2 * a for a in range(nd)] + [2 * a + 1 for a in range(nd)]
            + list(range(2 * nd, arr.ndim)))
    arr = arr.transpose(perm)
    return arr.reshape((_prod(counts), _prod(window)) + extra)


def shift_window_mask(grid, window, shift, dtype=np.float32):
    """Additive attention mask (n_windows, L, L) for cyclic-shift windows.

    Tokens may attend iff they belong to the same window of the truncated
    non-cyclic shifted partition (boundaries at positions congruent to the
    shift modulo the window size along each axis). Forbidden pairs get -1e9,
    which underflows to exactly zero after softmax in float32.
    """
    nd = len(grid)
    ids = np.zeros(grid, dtype=np.int64)
    for a, (g, w, s) in enumerate(zip(grid, window, shift)):
        ax = np.floor_divide(np.arange(g) - s, w) + 1
        shape = [1] * nd
        shape[a] = g
        ids = ids * (2 * g + 3) + ax.reshape(shape)
    rolled = np.roll(ids, tuple(-s for s in shift), axis=tuple(range(nd)))
    wins = _partition_np(rolled, window)
    return np.where(wins[:, :, None] == wins[:, None, :],
                    np.asarray(0.0, dtype),
                    np.asarray(-1e9, dtype))


def relative_position_index(window):
    """Flat lookup index (L, L) into a (prod(2w-1), heads) bias table."""
    nd = len(window)
    axes = [np.arange(w) for w in window]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    flat = coords.reshape(nd, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    index = np.zeros(rel.shape[1:], dtype=np.int64)
    for a in range(nd):
        index = index * (2 * window[a] - 1) + (rel[a] + window[a] - 1)
    return index


def multi_head_attention(x, qkv, proj, n_heads, bias=None, group_mask=None,
                         groups=1, record=False):
    """Standard scaled dot-product self-attention.

    x:          (B, L, D) with B = batch * groups (windows flatten into B)
    qkv:        Linear D -> 3D, proj: Linear D -> D
    bias:       optional Tensor (heads, L, L) added to every score block
                (relative-position bias)
    group_mask: optional numpy (groups, heads, L, L) additive mask; scores
                are viewed as (batch, groups, heads, L, L) for the add
    Returns (out, attn) with attn a (B, heads, L, L) numpy copy when
    record, else None.
    """
    b, l, d = x.shape
    if d % n_heads != 0:
        raise ShapeError(f"embed dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    fused = qkv(x)
    fused = reshape(fused, (b, l, 3, n_heads, dh))
    fused = transpose(fused, (2, 0, 3, 1, 4))
    q = reshape(narrow(fused, 0, 0, 1), (b, n_heads, l, dh))
    k = reshape(narrow(fused, 0, 1, 1), (b, n_heads, l, dh))
    v = reshape(narrow(fused, 0, 2, 1), (b, n_heads, l, dh))
    scores = matmul(q, transpose(k, (0, 1, 3, 2)))
    scores = mul(scores, Tensor(np.asarray(1.0 / math.sqrt(dh),
                                           dtype=scores.data.dtype)))
    if bias is not None:
        scores = add(scores, bias)
    if group_mask is not None:
        scores = reshape(scores, (b // groups, groups, n_heads, l, l))
        scores = add(scores, Tensor(group_mask))
        scores = reshape(scores, (b, n_heads, l, l))
    attn = softmax(scores, axis=-1)
    recorded = np.array(attn.data, copy=True) if record else None
    out = matmul(attn, v)
    out = transpose(out, (0, 2, 1, 3))
    out = reshape(out, (b, l, d))
    return proj(out), recorded


class Mlp(Module):
    def __init__(self, rng, dim, hidden, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(rng, dim, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, dim, dtype=dtype)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm transformer encoder block (global attention)."""

    def __init__(self, rng, dim, n_heads, mlp_ratio=4.0, drop=0.0,
                 dtype=np.float32):
        super().__init__()
        self.n_heads = int(n_heads)
        self.drop = float(drop)
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.qkv = Linear(rng, dim, 3 * dim, dtype=dtype)
        self.proj = Linear(rng, dim, dim, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(rng, dim, int(dim * mlp_ratio), dtype=dtype)

    def __call__(self, x, rng=None, record=False):
        h, attn = multi_head_attention(self.norm1(x), self.qkv, self.proj,
                                       self.n_heads, record=record)
        if self.drop > 0.0:
            h = dropout(h, self.drop, training=self.training, rng=rng)
        x = add(x, h)
        h = self.mlp(self.norm2(x))
        if self.drop > 0.0:
            h = dropout(h, self.drop, training=self.training, rng=rng)
        return add(x, h), attn


class SwinBlock(Module):
    """Window-attention block with optional cyclic shift.

    Operates on token grids shaped (N, g0..gk, D). The window is clamped
    per axis to the grid size, and the shift is dropped along any axis
    where the clamped window covers the whole grid (shifting a full-span
    window is a no-op partition-wise).
    """

    def __init__(self, rng, dim, n_heads, window, shift, mlp_ratio=4.0,
                 dtype=np.float32):
        super().__init__()
        self.dim = int(dim)
        self.n_heads = int(n_heads)
        self.window = tuple(int(w) for w in window)
        self.shift = tuple(int(s) for s in shift)
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.qkv = Linear(rng, dim, 3 * dim, dtype=dtype)
        self.proj = Linear(rng, dim, dim, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(rng, dim, int(dim * mlp_ratio), dtype=dtype)
        table_rows = _prod(2 * w - 1 for w in self.window)
        self.rel_bias = _normal(rng, (table_rows, self.n_heads), 0.02, dtype)
        self._masks = {}

    def _effective(self, grid):
        window = tuple(min(w, g) for w, g in zip(self.window, grid))
        shift = tuple(0 if win >= g else s
                      for s, win, g in zip(self.shift, window, grid))
        return window, shift

    def _bias(self, window):
        if window == self.window:
            index = relative_position_index(window)
        else:
            # clamped window: index into the full table, whose radix system
            # is keyed to the configured (unclamped) window extents
            nd = len(window)
            axes = [np.arange(w) for w in window]
            coords = np.stack(np.meshgrid(*axes, indexing="ij")).reshape(nd,
                                                                         -1)
            rel = coords[:, :, None] - coords[:, None, :]
            index = np.zeros(rel.shape[1:], dtype=np.int64)
            for a in range(nd):
                index = (index * (2 * self.window[a] - 1)
                         + (rel[a] + self.window[a] - 1))
        l = index.shape[0]
        rows = take(self.rel_bias, index.reshape(-1))
        rows = reshape(rows, (l, l, self.n_heads))
        return transpose(rows, (2, 0, 1))

    def __call__(self, x, record=False, centroid_grid=None):
        n = x.shape[0]
        grid = x.shape[1:-1]
        window, shift = self._effective(grid)
        h = self.norm1(x)
        if any(shift):
            h = roll(h, tuple(-s for s in shift),
                     tuple(range(1, 1 + len(grid))))
        windows, counts = window_partition(h, window)
        groups = _prod(counts)
        bias = self._bias(window)
        group_mask = None
        if any(shift):
            key = (grid, window, shift)
            if key not in self._masks:
                base = shift_window_mask(grid, window, shift,
                                         dtype=x.data.dtype)
                self._masks[key] = np.ascontiguousarray(np.broadcast_to(
                    base[:, None], (groups, self.n_heads) + base.shape[1:]))
            group_mask = self._masks[key]
        out, attn = multi_head_attention(windows, self.qkv, self.proj,
                                         self.n_heads, bias=bias,
                                         group_mask=group_mask,
                                         groups=groups, record=record)
        out = window_unpartition(out, window, counts, n)
        if any(shift):
            out = roll(out, shift, tuple(range(1, 1 + len(grid))))
        x = add(x, out)
        x = add(x, self.mlp(self.norm2(x)))
        meta = None
        if record:
            if centroid_grid is None:
                axes = [np.arange(g, dtype=np.float64) for g in grid]
                centroid_grid = np.stack(np.meshgrid(*axes, indexing="ij"),
                                         axis=-1)
            # partition centroids exactly like the tokens so each recorded
            # attention row aligns with its window's voxel positions
            if any(shift):
                centroid_grid = np.roll(
                    centroid_grid, tuple(-s for s in shift),
                    axis=tuple(range(len(grid))))
            meta = _partition_np(centroid_grid, window)
        return x, attn, meta


class PatchEmbed(Module):
    """Non-overlapping patch embedding for an (N, C, *spatial) input.

    Patches are cut by reshape/transpose and projected with one Linear,
    which is exactly a stride=patch convolution. Spatial dims that do not
    divide the patch are zero-padded at the high end when pad_policy is
    "pad", else it is an error.
    """

    def __init__(self, rng, in_ch, patch, dim, pad_policy="strict",
                 dtype=np.float32):
        super().__init__()
        self.in_ch = int(in_ch)
        self.patch = tuple(int(p) for p in patch)
        self.dim = int(dim)
        self.pad_policy = pad_policy
        self.proj = Linear(rng, in_ch * _prod(self.patch), dim, dtype=dtype)

    def __call__(self, x):
        n, c = x.shape[0], x.shape[1]
        spatial = x.shape[2:]
        nd = len(self.patch)
        if len(spatial) != nd:
            raise ShapeError(f"expected {nd} spatial dims, got {spatial}")
        pads = []
        for s, p in zip(spatial, self.patch):
            rem = (-s) % p
            if rem and self.pad_policy != "pad":
                raise ShapeError(
                    f"spatial dims {spatial} not divisible by patch "
                    f"{self.patch} (pad_policy=strict)")
            pads.append(rem)
        if any(pads):
            x = _zero_pad_high(x, pads)
            spatial = x.shape[2:]
        grid = tuple(s // p for s, p in zip(spatial, self.patch))
        shape = [n, c]
        for g, p in zip(grid, self.patch):
            shape.extend([g, p])
        x = reshape(x, tuple(shape))
        perm = ([0] + [2 + 2 * a for a in range(nd)]
                + [1] + [3 + 2 * a for a in range(nd)])
        x = transpose(x, perm)
        x = reshape(x, (n,) + grid + (c * _prod(self.patch),))
        tokens = self.proj(reshape(x, (n, _prod(grid), c * _prod(self.patch))))
        return tokens, grid

    def centroids(self, grid):
        """Voxel-space centroid (L, nd) of each patch, raster order."""
        axes = [np.arange(g, dtype=np.float64) * p + (p - 1) / 2.0
                for g, p in zip(grid, self.patch)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)


def _zero_pad_high(x, pads):
    """Zero-pad spatial axes (axes 2..) of (N, C, *spatial) at the high end."""
    for a, p in enumerate(pads):
        if p == 0:
            continue
        axis = 2 + a
        shape = list(x.shape)
        shape[axis] = p
        zeros = Tensor(np.zeros(shape, dtype=x.data.dtype))
        x = concat([x, zeros], axis=axis)
    return x


class PatchMerge(Module):
    """Swin downsampling: concat each 2^nd block of neighbors, project
    2^nd * D -> 2D. Grid must be even along every axis (or pad_policy
    "pad" zero-extends odd axes by one token)."""

    def __init__(self, rng, dim, nd, pad_policy="strict", dtype=np.float32):
        super().__init__()
        self.dim = int(dim)
        self.nd = int(nd)
        self.pad_policy = pad_policy
        self.norm = LayerNorm((2 ** nd) * dim, dtype=dtype)
        self.proj = Linear(rng, (2 ** nd) * dim, 2 * dim, bias=False,
                           dtype=dtype)

    def __call__(self, x):
        n = x.shape[0]
        grid = x.shape[1:-1]
        d = x.shape[-1]
        pads = [g % 2 for g in grid]
        if any(pads):
            if self.pad_policy != "pad":
                raise ShapeError(f"grid {grid} must be even to merge "
                                 f"(pad_policy=strict)")
            for a, p in enumerate(pads):
                if p:
                    axis = 1 + a
                    shape = list(x.shape)
                    shape[axis] = 1
                    x = concat([x, Tensor(np.zeros(shape,
                                                   dtype=x.data.dtype))],
                               axis=axis)
            grid = x.shape[1:-1]
        half = tuple(g // 2 for g in grid)
        shape = [n]
        for h in half:
            shape.extend([h, 2])
        shape.append(d)
        x = reshape(x, tuple(shape))
        perm = ([0] + [1 + 2 * a for a in range(self.nd)]
                + [2 + 2 * a for a in range(self.nd)] + [2 * self.nd + 1])
        x = transpose(x, perm)
        x = reshape(x, (n,) + half + ((2 ** self.nd) * d,))
        return self.proj(self.norm(x)), half


class LstmCell(Module):
    def __init__(self, rng, in_dim, hidden, dtype=np.float32):
        super().__init__()
        self.hidden = int(hidden)
        self.w_ih = _normal(rng, (in_dim, 4 * hidden),
                            1.0 / math.sqrt(in_dim), dtype)
        self.w_hh = _normal(rng, (hidden, 4 * hidden),
                            1.0 / math.sqrt(hidden), dtype)
        self.bias = Tensor(np.zeros(4 * hidden, dtype=dtype),
                           requires_grad=True)

    def step(self, x_t, h, c):
        gates = add(add(matmul(x_t, self.w_ih), matmul(h, self.w_hh)),
                    self.bias)
        u = self.hidden
        i = sigmoid(narrow(gates, 1, 0, u))
        f = sigmoid(narrow(gates, 1, u, u))
        g = tanh(narrow(gates, 1, 2 * u, u))
        o = sigmoid(narrow(gates, 1, 3 * u, u))
        c = add(mul(f, c), mul(i, g))
        h = mul(o, tanh(c))
        return h, c


class BiLstm(Module):
    """Bidirectional LSTM over (N, S, F); returns the concatenated final
    hidden states of both directions, shape (N, 2 * hidden). Initial
    hidden and cell states are zero."""

    def __init__(self, rng, in_dim, hidden, dtype=np.float32):
        super().__init__()
        self.hidden = int(hidden)
        self.fw = LstmCell(rng, in_dim, hidden, dtype=dtype)
        self.bw = LstmCell(rng, in_dim, hidden, dtype=dtype)

    def __call__(self, x):
        n, s, f = x.shape
        dtype = x.data.dtype
        states = []
        for cell, order in ((self.fw, range(s)),
                            (self.bw, range(s - 1, -1, -1))):
            h = Tensor(np.zeros((n, self.hidden), dtype=dtype))
            c = Tensor(np.zeros((n, self.hidden), dtype=dtype))
            for t in order:
                x_t = reshape(narrow(x, 1, t, 1), (n, f))
                h, c = cell.step(x_t, h, c)
            states.append(h)
        return concat(states, axis=1)


__all__ = [
    "BatchNorm", "BiLstm", "Conv", "Linear", "LayerNorm", "LstmCell",
    "Mlp", "Module", "PatchEmbed", "PatchMerge", "SwinBlock",
    "TransformerBlock", "multi_head_attention", "relative_position_index",
    "shift_window_mask", "sinusoid_positions", "window_partition",
    "window_unpartition",
]
