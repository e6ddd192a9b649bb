"""Mechanistic analysis instruments: effective receptive-field maps with
theoretical receptive-field arithmetic, attention-distance distributions,
centered kernel alignment, and the ADMP activation-dump format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .labels import DataError, risk_bin
from .tensor import NumericError, ShapeError, Tensor, backward, narrow, tsum

ERF_THRESHOLD = 0.01
FAR_DISTANCE = 20.0  # voxel cutoff behind the pct_gt20 statistic


# ---------------------------------------------------------------------------
# effective receptive fields


@dataclass
class ErfMap:
    """Input-gradient receptive field of one tap of one model.

    gradient: |d(tap)/d(input)| summed over channels, input spatial shape.
    normalized: gradient / max; mask: normalized > threshold (strict).
    erf_radius: max distance from the gradient-weighted mask centroid to
    any mask voxel. et_ratio: erf_radius over the config's theoretical
    radius for the tap (None when the model carries no config).
    """
    gradient: np.ndarray
    normalized: np.ndarray
    mask: np.ndarray
    erf_size: int
    erf_radius: float
    et_ratio: float | None


def _nearest_token(centroids, input_shape):
    """Index of the token whose centroid sits closest to the volume
    center; NaN centroid rows (class tokens) never win. First index wins
    ties, matching np.argmin."""
    cents = np.asarray(centroids, dtype=np.float64)
    center = (np.asarray(input_shape[:cents.shape[1]], dtype=np.float64)
              - 1.0) / 2.0
    d = np.linalg.norm(cents - center, axis=1)
    d[np.isnan(d)] = np.inf
    return int(np.argmin(d))


def _tap_scalar(result, input_shape, tap):
    """Reduce a forward tap to the scalar the ERF differentiates: the
    prediction itself, a grid tap's center unit summed over channels, the
    nearest-to-center token summed over features, or a vector tap's sum."""
    if tap == "output":
        return tsum(result.pred)
    stages = {s.name: s for s in result.stages}
    if tap not in stages:
        raise ShapeError(f"unknown tap {tap!r}; model stages are "
                         f"{sorted(stages)} or 'output'")
    st = stages[tap]
    if st.kind == "grid":
        h = st.data
        for axis, size in enumerate(h.shape[2:], start=2):
            h = narrow(h, axis, size // 2, 1)
        return tsum(h)
    if st.kind == "tokens":
        idx = _nearest_token(st.centroids, input_shape)
        return tsum(narrow(st.data, 1, idx, 1))
    return tsum(st.data)


def erf_map(model, x, tap="output", threshold=ERF_THRESHOLD):
    """One-backward-pass effective receptive field of ``tap``.

    ``x`` is a single unbatched input (channels, *spatial). The model only
    needs a ``forward`` in the ForwardResult protocol; et_ratio is filled
    when it also carries a ``config``.
    """
    x = np.asarray(x)
    xt = Tensor(x[None], requires_grad=True)
    cfg = getattr(model, "config", None)
    shape = x.shape[1:] if cfg is None else cfg.input_shape
    result = model.forward(xt, record_stages=tap != "output")
    backward(_tap_scalar(result, shape, tap))
    grad = np.abs(np.asarray(xt.grad, dtype=np.float64))[0].sum(axis=0)
    gmax = float(grad.max())
    if gmax <= 0.0:
        raise NumericError(f"all-zero gradient at tap {tap!r}: "
                           "receptive field undefined")
    normalized = grad / gmax
    mask = normalized > threshold
    pos = np.argwhere(mask).astype(np.float64)
    weights = normalized[mask]
    centroid = (weights[:, None] * pos).sum(axis=0) / weights.sum()
    radius = float(np.linalg.norm(pos - centroid, axis=1).max())
    ratio = None
    if cfg is not None:
        theo = theoretical_rf(cfg, tap)
        if theo == 0.0:
            ratio = 1.0 if radius == 0.0 else math.inf
        else:
            ratio = radius / theo
    return ErfMap(gradient=grad, normalized=normalized, mask=mask,
                  erf_size=int(mask.sum()), erf_radius=radius,
                  et_ratio=ratio)


# ---------------------------------------------------------------------------
# theoretical receptive fields


def conv_extent(layers):
    """One-axis receptive-field extent of a (kernel, stride) chain."""
    extent, jump = 1, 1
    for k, s in layers:
        extent += (k - 1) * jump
        jump *= s
    return extent


def _cnn_layers(cfg, n_stages):
    layers = [(3, 1), (2, 2)]  # stem conv + max pool
    for stride in cfg.stage_strides[:n_stages]:
        layers += [(3, stride), (3, 1)]
    return layers


def _stage_index(stage, prefix, count):
    if stage.startswith(prefix):
        try:
            k = int(stage[len(prefix):])
        except ValueError:
            return None
        if 1 <= k <= count:
            return k
    return None


def _swin_axis_extent(n, patch, window, shift, depths, upto):
    """Reachable voxel extent along one axis for the center token of swin
    stage ``upto``: backward interval propagation through the stage's
    blocks, the merges, and the patch embedding. Windows are anchored to
    the truncated shifted partition, so reach saturates instead of growing
    like a sliding kernel."""
    grids = [n // patch if n % patch == 0 else n // patch + 1]
    for _ in depths[1:]:
        g = grids[-1]
        grids.append(g // 2 if g % 2 == 0 else (g + 1) // 2)
    jump = patch * 2 ** (upto - 1)
    g_tap = grids[upto - 1]
    cents = np.arange(g_tap) * jump + (jump - 1) / 2.0
    q = int(np.argmin(np.abs(cents - (n - 1) / 2.0)))
    lo = hi = q
    for s in range(upto, 0, -1):
        g = grids[s - 1]
        for b in reversed(range(depths[s - 1])):
            w_eff = min(window, g)
            s_eff = 0 if (w_eff >= g or b % 2 == 0) else shift
            lo = max(0, (lo - s_eff) // w_eff * w_eff + s_eff)
            hi = min(g - 1, (hi - s_eff) // w_eff * w_eff + s_eff + w_eff - 1)
        if s > 1:
            lo, hi = 2 * lo, min(2 * hi + 1, grids[s - 2] - 1)
    v_lo = lo * patch
    v_hi = min(hi * patch + patch - 1, n - 1)
    return v_hi - v_lo + 1


def theoretical_extents(cfg, stage):
    """Per-axis voxel extents reachable by the tap's center unit, clipped
    to the input."""
    shape = np.asarray(cfg.input_shape, dtype=np.int64)
    if stage == "output":
        return shape.copy()
    if cfg.family == "cnn":
        k = _stage_index(stage, "stage", len(cfg.stage_channels))
        if k is not None:
            ext = conv_extent(_cnn_layers(cfg, k))
            return np.minimum(ext, shape)
    elif cfg.family == "vit":
        if _stage_index(stage, "block", cfg.depth) is not None:
            return shape.copy()  # every token attends to every token
    elif cfg.family == "swin":
        if stage == "patch_embed":
            return np.minimum(np.asarray(cfg.patch_size), shape)
        k = _stage_index(stage, "stage", len(cfg.stage_depths))
        if k is not None:
            return np.array([
                _swin_axis_extent(n, p, w, w // 2, cfg.stage_depths, k)
                for n, p, w in zip(cfg.input_shape, cfg.patch_size,
                                   cfg.window_size)], dtype=np.int64)
    else:  # hybrids: per-slice 2-D encoder ending in GAP, then aggregator
        if stage == "encoder":
            return np.array([1, shape[1], shape[2]], dtype=np.int64)
        if stage == "aggregator":
            return shape.copy()
    raise ShapeError(f"unknown stage {stage!r} for family {cfg.family!r}")


def theoretical_rf(cfg, stage):
    """Scalar radius: Euclidean norm of the per-axis half-extents, the
    center-to-corner distance of the reachable box."""
    half = (theoretical_extents(cfg, stage).astype(np.float64) - 1.0) / 2.0
    return float(np.linalg.norm(half))


# ---------------------------------------------------------------------------
# attention distances


def attention_distances(records, k=5, include_self=False):
    """Pooled voxel distances from each query to its k most-attended
    tokens, over every record, group, and head.

    Class tokens (NaN centroid rows) never appear as query or target;
    self-attention pairs are excluded unless ``include_self``; only
    strictly positive attention weights are candidates; ties prefer the
    lower token index.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    out = []
    for rec in records:
        attn = np.asarray(rec.attn, dtype=np.float64)
        if rec.centroids is None:
            raise DataError(f"attention record {rec.layer!r} lacks "
                            "token centroids")
        cents = np.asarray(rec.centroids, dtype=np.float64)
        if cents.ndim == 2:
            cents = cents[None]
        groups, heads, length, _ = attn.shape
        for g in range(groups):
            cg = cents[g if cents.shape[0] > 1 else 0]
            valid = ~np.isnan(cg).any(axis=1)
            pair_d = np.linalg.norm(cg[:, None, :] - cg[None, :, :], axis=2)
            for h in range(heads):
                a = attn[g, h]
                for i in range(length):
                    if not valid[i]:
                        continue
                    allowed = valid & (a[i] > 0.0)
                    if not include_self:
                        allowed[i] = False
                    cand = np.nonzero(allowed)[0]
                    if cand.size == 0:
                        continue
                    top = cand[np.argsort(-a[i, cand], kind="stable")[:k]]
                    out.extend(pair_d[i, top])
    return np.asarray(out, dtype=np.float64)


def distance_stats(distances):
    """mean/sd/median/fraction-beyond-20-voxels/max of a distance pool."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise DataError("no attention distances to summarize")
    return {"count": int(d.size), "mean": float(d.mean()),
            "sd": float(d.std()), "median": float(np.median(d)),
            "pct_gt20": float((d > FAR_DISTANCE).mean()),
            "max": float(d.max())}


def attention_distance_stats(labeled_records, k=5):
    """Per-risk-bin distance summaries from (true p_kc, records) pairs.

    Bins come from the true posterior, not from predictions; bins with no
    distances are absent from the result.
    """
    pools = {}
    for p_kc, records in labeled_records:
        b = risk_bin(float(p_kc)).value
        d = attention_distances(records, k=k)
        if d.size:
            pools.setdefault(b, []).append(d)
    return {b: distance_stats(np.concatenate(ds))
            for b, ds in pools.items()}


# ---------------------------------------------------------------------------
# centered kernel alignment


def _centered(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"{name} must be 2-D (samples x features), got "
                        f"shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise DataError(f"{name} contains non-finite activations")
    return arr - arr.mean(axis=0, keepdims=True)


def cka_pair(x, y):
    """Linear CKA between two activation matrices over the same samples.

    Columns are mean-centered first; when features outnumber samples the
    N x N Gram form is used (identical value, bounded memory).
    """
    xc = _centered(x, "X")
    yc = _centered(y, "Y")
    n = xc.shape[0]
    if yc.shape[0] != n:
        raise DataError(f"sample-count mismatch: {n} vs {yc.shape[0]}")
    if n < 2:
        raise DataError("cka needs at least 2 samples")
    if max(xc.shape[1], yc.shape[1]) > n:
        kx = xc @ xc.T
        ky = yc @ yc.T
        num = float((kx * ky).sum())
        den = float(np.linalg.norm(kx) * np.linalg.norm(ky))
    else:
        num = float(np.linalg.norm(xc.T @ yc) ** 2)
        den = float(np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc))
    if den == 0.0:
        raise DataError("activation matrix is all-zero after centering")
    return num / den


def cka_matrix(fold_dumps):
    """Fold-averaged pairwise CKA. ``fold_dumps`` is a list (one entry per
    fold) of {layer_or_model_id: (N, D) activations}; every fold must dump
    the same ids. Returns (ids, matrix)."""
    if not fold_dumps:
        raise DataError("no activation dumps given")
    ids = list(fold_dumps[0])
    m = len(ids)
    total = np.zeros((m, m), dtype=np.float64)
    for fold in fold_dumps:
        if list(fold) != ids:
            raise DataError(f"fold dumps disagree on ids: {list(fold)} vs "
                            f"{ids}")
        for i in range(m):
            for j in range(i, m):
                v = cka_pair(fold[ids[i]], fold[ids[j]])
                total[i, j] += v
                total[j, i] += v * (i != j)
    return ids, total / len(fold_dumps)


# ---------------------------------------------------------------------------
# ADMP activation dumps


ADMP_MAGIC = b"ADMP"


def _check_activations(layers):
    for lid, arr in layers.items():
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise DataError(f"layer {lid!r} must be 2-D, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise DataError(f"layer {lid!r} has non-finite activations")


def write_activation_dump(path, model_id, layers):
    """magic, model id, layer count, then per layer (id, N, D, f32 row-major
    data)."""
    _check_activations(layers)
    with open(path, "wb") as fh:
        fh.write(ADMP_MAGIC)
        raw = str(model_id).encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", len(layers)))
        for lid, arr in layers.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            lraw = str(lid).encode("utf-8")
            fh.write(struct.pack("<I", len(lraw)))
            fh.write(lraw)
            fh.write(struct.pack("<II", *data.shape))
            fh.write(data.tobytes())


def read_activation_dump(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as err:
        raise DataError(f"cannot read dump {path}: {err}") from err
    if blob[:4] != ADMP_MAGIC:
        raise DataError(f"{path}: bad dump magic {blob[:4]!r}")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise DataError(f"{path}: truncated dump")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    def take_str():
        nonlocal off
        (ln,) = take("<I")
        if off + ln > len(blob):
            raise DataError(f"{path}: truncated dump")
        s = blob[off:off + ln].decode("utf-8")
        off += ln
        return s

    model_id = take_str()
    (count,) = take("<I")
    layers = {}
    for _ in range(count):
        lid = take_str()
        n, d = take("<II")
        nbytes = 4 * n * d
        if off + nbytes > len(blob):
            raise DataError(f"{path}: truncated dump")
        arr = np.frombuffer(blob, dtype="<f4", count=n * d,
                            offset=off).reshape(n, d)
        off += nbytes
        if not np.isfinite(arr).all():
            raise DataError(f"{path}: layer {lid!r} has non-finite values")
        layers[lid] = arr.copy()
    if off != len(blob):
        raise DataError(f"{path}: {len(blob) - off} trailing bytes")
    return model_id, layers


__all__ = [
    "ADMP_MAGIC", "ERF_THRESHOLD", "ErfMap", "attention_distance_stats",
    "attention_distances", "cka_matrix", "cka_pair", "conv_extent",
    "distance_stats", "erf_map", "read_activation_dump",
    "theoretical_extents", "theoretical_rf", "write_activation_dump",
]
