"""Volumetric preprocessing, augmentation, phantom synthesis, and VOLB files.

Volumes are float32 arrays with per-axis physical spacing in millimeters.
Physical position of voxel index i along an axis is i * spacing (voxel
centers, origin at index 0). All interpolation is trilinear.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from volab.labels import DataError, GmmModel, gmm_posterior


@dataclass
class Volume:
    data: np.ndarray               # (d0, d1, d2) float32
    spacing: tuple[float, float, float]  # mm per voxel along each axis

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DataError(f"volume must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"bad spacing {self.spacing}")

    @property
    def shape(self):
        return self.data.shape


# ---------------------------------------------------------------------------
# VOLB binary format

VOLUME_MAGIC = b"VOLB"
VOLUME_VERSION = 1


def write_volume(path, volume: Volume) -> None:
    """magic, version u8, dims 3xu32, spacing 3xf32, then f32 voxels in
    slice-major (C) order."""
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<B", VOLUME_VERSION))
        fh.write(struct.pack("<3I", *volume.data.shape))
        fh.write(struct.pack("<3f", *volume.spacing))
        fh.write(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())


def read_volume(path) -> Volume:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as err:
        raise DataError(f"cannot read volume {path}: {err}") from err
    if blob[:4] != VOLUME_MAGIC:
        raise DataError(f"{path}: bad volume magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<B", blob, 4)
    if version != VOLUME_VERSION:
        raise DataError(f"{path}: unsupported volume version {version}")
    dims = struct.unpack_from("<3I", blob, 5)
    spacing = struct.unpack_from("<3f", blob, 17)
    count = int(np.prod(dims))
    expected = 29 + 4 * count
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} bytes, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=29).reshape(dims)
    return Volume(data.copy(), spacing)


# ---------------------------------------------------------------------------
# geometry


def resample_trilinear(volume: Volume, target_spacing) -> Volume:
    """Resample onto an isotropic-or-not target spacing grid.

    Output dims are round(dim * spacing / target) (at least 1). Output voxel
    j samples input coordinate j * target / source with edge clamping, which
    reproduces trilinear functions of physical position exactly away from
    the clamped border.
    """
    if np.isscalar(target_spacing):
        target_spacing = (target_spacing,) * 3
    target_spacing = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target_spacing):
        raise DataError(f"bad target spacing {target_spacing}")
    out_dims = tuple(max(1, int(round(n * s / t)))
                     for n, s, t in zip(volume.shape, volume.spacing, target_spacing))
    axes = [np.arange(n, dtype=np.float64) * t / s
            for n, s, t in zip(out_dims, volume.spacing, target_spacing)]
    coords = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(volume.data.astype(np.float64), coords,
                                  order=1, mode="nearest")
    return Volume(out.astype(np.float32), target_spacing)


def crop_or_pad(volume: Volume, target_shape) -> Volume:
    """Center crop or symmetric zero-pad each axis to the target shape.

    Cropping keeps [floor((src-tgt)/2), ...); padding places the original at
    offset floor((tgt-src)/2), so 49 -> 80 puts it at indices 15..63.
    """
    target_shape = tuple(int(n) for n in target_shape)
    if len(target_shape) != 3 or any(n <= 0 for n in target_shape):
        raise DataError(f"bad target shape {target_shape}")
    data = volume.data
    for axis, (src, tgt) in enumerate(zip(data.shape, target_shape)):
        if tgt <= src:
            off = (src - tgt) // 2
            sl = [slice(None)] * 3
            sl[axis] = slice(off, off + tgt)
            data = data[tuple(sl)]
        else:
            before = (tgt - src) // 2
            pad = [(0, 0)] * 3
            pad[axis] = (before, tgt - src - before)
            data = np.pad(data, pad)
    return Volume(data.copy(), volume.spacing)


def zscore(volume: Volume, eps=1e-8) -> Volume:
    """Instance z-score over all voxels (population statistics)."""
    mu = float(volume.data.mean())
    sd = float(volume.data.std())
    if sd <= eps:
        raise DataError(f"degenerate volume: intensity std {sd} <= {eps}")
    return Volume((volume.data - mu) / sd, volume.spacing)


def slice_index_for_angle(angle_deg: float, n_slices: int) -> int:
    """Radial-scan convention: slice k sits at k * 360 / n_slices degrees."""
    step = 360.0 / n_slices
    return int(round((angle_deg % 360.0) / step)) % n_slices


def _resize_bilinear_2d(img, target_hw):
    th, tw = target_hw
    h, w = img.shape
    # align-corners mapping so equal sizes reduce to a pure copy
    ys = (np.arange(th) * ((h - 1) / (th - 1))) if th > 1 else np.zeros(1)
    xs = (np.arange(tw) * ((w - 1) / (tw - 1))) if tw > 1 else np.zeros(1)
    grid = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img.astype(np.float64), grid,
                                   order=1, mode="nearest")


def extract_bscan(volume: Volume, slice_index: int, target_hw=(224, 224)):
    """Pull one cross-sectional slice (axis 0) and resize it bilinearly."""
    n = volume.shape[0]
    if not 0 <= slice_index < n:
        raise DataError(f"slice {slice_index} outside volume with {n} slices")
    img = volume.data[slice_index].astype(np.float64)
    if tuple(target_hw) == img.shape:
        return img.astype(np.float32)
    return _resize_bilinear_2d(img, target_hw).astype(np.float32)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5          # per in-plane axis
    max_rotation_deg: float = 15.0  # per axis, uniform in +-max
    elastic: bool = True
    elastic_grid_spacing: int = 10  # voxels between coarse nodes
    elastic_sigma: float = 10.0     # Gaussian smoothing, in voxels
    elastic_alpha: float = 1.0      # displacement scale, in voxels


def flip_volume(volume: Volume, axes) -> Volume:
    data = volume.data
    for axis in axes:
        data = np.flip(data, axis=axis)
    return Volume(data.copy(), volume.spacing)


def rotate_volume(volume: Volume, angles_deg) -> Volume:
    """Rigid rotation about the volume center (voxel coordinates), trilinear
    resampling, zero fill outside. Euler order: axis0, axis1, axis2."""
    a0, a1, a2 = [np.deg2rad(a) for a in angles_deg]

    def rot(axis, theta):
        c, s = np.cos(theta), np.sin(theta)
        m = np.eye(3)
        i, j = [k for k in range(3) if k != axis]
        m[i, i], m[i, j], m[j, i], m[j, j] = c, -s, s, c
        return m

    matrix = rot(0, a0) @ rot(1, a1) @ rot(2, a2)
    center = (np.array(volume.shape, dtype=np.float64) - 1.0) / 2.0
    idx = np.indices(volume.shape, dtype=np.float64)
    rel = idx.reshape(3, -1) - center[:, None]
    src = matrix.T @ rel + center[:, None]   # pull-back sampling
    out = ndimage.map_coordinates(volume.data.astype(np.float64),
                                  src.reshape((3,) + volume.shape),
                                  order=1, mode="constant", cval=0.0)
    return Volume(out.astype(np.float32), volume.spacing)


def _upsample_axis(field, factor, out_len):
    # linear interpolation of coarse nodes placed every `factor` voxels
    n = field.shape[0]
    pos = np.arange(out_len, dtype=np.float64) / factor
    lo = np.clip(np.floor(pos).astype(int), 0, n - 1)
    hi = np.clip(lo + 1, 0, n - 1)
    frac = (pos - lo).reshape((-1,) + (1,) * (field.ndim - 1))
    return np.take(field, lo, axis=0) * (1 - frac) + np.take(field, hi, axis=0) * frac


def elastic_displacement(shape, cfg: AugmentConfig, rng) -> np.ndarray:
    """Coarse-grid N(0,1) displacement field, Gaussian-smoothed on the coarse
    grid (sigma expressed in voxels), scaled by alpha, trilinearly upsampled.
    Returns (3, d0, d1, d2) voxel displacements."""
    g = cfg.elastic_grid_spacing
    coarse_dims = tuple(int(np.ceil(n / g)) + 1 for n in shape)
    raw = rng.standard_normal((3,) + coarse_dims)
    sigma_coarse = cfg.elastic_sigma / g
    smooth = np.stack([ndimage.gaussian_filter(raw[a], sigma_coarse, mode="nearest")
                       for a in range(3)])
    smooth *= cfg.elastic_alpha
    up = []
    for c in range(3):
        comp = smooth[c]
        for axis in range(3):
            comp = np.moveaxis(
                _upsample_axis(np.moveaxis(comp, axis, 0), g, shape[axis]), 0, axis)
        up.append(comp)
    return np.stack(up)


def elastic_deform(volume: Volume, cfg: AugmentConfig, rng) -> Volume:
    """Warp by a smooth random displacement field (edge-clamped sampling)."""
    disp = elastic_displacement(volume.shape, cfg, rng)
    idx = np.indices(volume.shape, dtype=np.float64)
    out = ndimage.map_coordinates(volume.data.astype(np.float64), idx + disp,
                                  order=1, mode="nearest")
    return Volume(out.astype(np.float32), volume.spacing)


def augment_volume(volume: Volume, cfg: AugmentConfig, rng) -> Volume:
    """Training-time augmentation: in-plane flips, small rotations, elastic."""
    out = volume
    axes = [a for a in (1, 2) if rng.random() < cfg.flip_prob]
    if axes:
        out = flip_volume(out, axes)
    if cfg.max_rotation_deg > 0:
        angles = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, size=3)
        out = rotate_volume(out, angles)
    if cfg.elastic:
        out = elastic_deform(out, cfg, rng)
    return out


# ---------------------------------------------------------------------------
# phantom synthesis


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (0.5, 0.5, 0.5)
    anomaly_amplitude: float = 1.0
    anomaly_sparsity: float = 0.2   # fraction of voxels carrying perturbation
    noise_sigma: float = 0.05
    label_gmm: GmmModel = field(default_factory=lambda: default_phantom_gmm())

    def __post_init__(self):
        if not 0.0 < self.anomaly_sparsity < 1.0:
            raise DataError(f"sparsity {self.anomaly_sparsity} outside (0, 1)")
        if self.anomaly_amplitude < 0 or self.noise_sigma < 0:
            raise DataError("amplitude and noise must be nonnegative")


def default_phantom_gmm() -> GmmModel:
    """Label mixture over (perturbation energy, support spread). The modes
    differ only along energy, so risk is monotone in anomaly amplitude."""
    return GmmModel(weights=[0.5, 0.5],
                    means=[[0.0, 0.55], [1.0, 0.55]],
                    covariances=[np.diag([0.03, 0.05]), np.diag([0.03, 0.05])])


def _layered_background(shape):
    d0, d1, d2 = shape
    s = np.linspace(-0.5, 0.5, d0)[:, None, None]
    y = np.linspace(0.0, 1.0, d1)[None, :, None]
    x = np.linspace(-0.5, 0.5, d2)[None, None, :]
    surface = 0.45 + 0.15 * (x ** 2 + s ** 2)   # shallow dome
    thickness = 0.08
    return np.exp(-0.5 * ((y - surface) / thickness) ** 2)


def phantom_features(volume_shape, support, perturbation):
    """2-D label features: RMS perturbation energy over the volume and the
    RMS support radius normalized by the half-diagonal."""
    energy = float(np.sqrt(np.mean(perturbation ** 2)))
    coords = np.argwhere(support)
    centroid = coords.mean(axis=0)
    spread = float(np.sqrt(np.mean(((coords - centroid) ** 2).sum(axis=1))))
    half_diag = 0.5 * float(np.linalg.norm(volume_shape))
    return np.array([energy, spread / half_diag])


def generate_phantom(spec: PhantomSpec, rng):
    """Synthesize one labeled phantom.

    Returns (Volume, p_kc, features). The anomaly is a smooth random field
    restricted to its top-|sparsity| quantile support, normalized to unit
    RMS over the volume, then scaled by the amplitude; features and the
    label are computed from the clean perturbation before sensor noise.
    """
    shape = tuple(spec.shape)
    background = _layered_background(shape)

    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), 2.0, mode="nearest")
    cut = np.quantile(field_, 1.0 - spec.anomaly_sparsity)
    support = field_ > cut
    anomaly = np.where(support, field_ - cut, 0.0)
    rms = np.sqrt(np.mean(anomaly ** 2))
    if rms <= 0:
        raise DataError("degenerate anomaly support")
    anomaly = anomaly / rms * spec.anomaly_amplitude

    x = phantom_features(shape, support, anomaly)
    p_kc = gmm_posterior(x, spec.label_gmm)

    noise = spec.noise_sigma * rng.standard_normal(shape)
    data = (background + anomaly + noise).astype(np.float32)
    return Volume(data, spec.spacing), float(p_kc), x
