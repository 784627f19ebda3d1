"""Seeded spatial and intensity augmentation for training crops.

All spatial transforms are folded into one backward displacement field
``field[:, p] = q - p``: output voxel ``p`` is read from input coordinate
``q = origin + p + field(p)``, so each sample is interpolated exactly once.
The affine part acts about the crop center::

    q = c + Aniso * iso * Rz Ry Rx (p - c) + translation + elastic(p)

with the X rotation applied first. Axes x, y, z are array axes 0, 1, 2.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from lacare.preprocess import sample
from lacare.volume_io import LabelVolume, Volume


@dataclass(frozen=True)
class AugmentConfig:
    """Uniform sampling ranges. Voxel-unit ranges refer to the training crop grid.

    ``label_factor`` is the per-label intensity modulation range; its
    default is a package choice.
    """
    translation: float = 20.0
    rotation: float = 0.35
    iso_scale: tuple[float, float] = (0.8, 1.2)
    aniso_scale: tuple[float, float] = (0.9, 1.1)
    elastic_nodes: int = 8
    elastic: float = 15.0
    intensity_shift: float = 0.2
    intensity_scale: tuple[float, float] = (0.6, 1.4)
    label_factor: tuple[float, float] = (0.9, 1.1)
    enabled: bool = True

    def scaled(self, factor: float) -> "AugmentConfig":
        """Shrink the voxel-unit ranges (translation, elastic) for smaller crops."""
        return replace(self, translation=self.translation * factor, elastic=self.elastic * factor)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(translation=0.0, rotation=0.0, iso_scale=(1.0, 1.0), aniso_scale=(1.0, 1.0),
                   elastic=0.0, intensity_shift=0.0, intensity_scale=(1.0, 1.0),
                   label_factor=(1.0, 1.0))


@dataclass
class SpatialParams:
    translation: np.ndarray
    rotation: np.ndarray
    iso_scale: float
    aniso_scale: np.ndarray
    elastic_grid: np.ndarray  # (nodes, nodes, nodes, 3)

    @classmethod
    def identity(cls, nodes: int = 8) -> "SpatialParams":
        return cls(np.zeros(3), np.zeros(3), 1.0, np.ones(3), np.zeros((nodes, nodes, nodes, 3)))

    def is_identity(self) -> bool:
        return (not self.translation.any() and not self.rotation.any() and self.iso_scale == 1.0
                and np.all(self.aniso_scale == 1.0) and not self.elastic_grid.any())


@dataclass
class IntensityParams:
    shift: float = 0.0
    scale: float = 1.0
    per_label_factor: dict[int, float] = field(default_factory=lambda: {1: 1.0, 2: 1.0})


def _uniform(rng, lo, hi, size=None):
    return rng.uniform(lo, hi, size) if hi > lo else np.full(size, lo) if size else float(lo)


def sample_spatial_params(rng: np.random.Generator, config: AugmentConfig) -> SpatialParams:
    n = config.elastic_nodes
    t = _uniform(rng, -config.translation, config.translation, 3)
    r = _uniform(rng, -config.rotation, config.rotation, 3)
    s = float(_uniform(rng, *config.iso_scale))
    a = _uniform(rng, *config.aniso_scale, 3)
    e = _uniform(rng, -config.elastic, config.elastic, (n, n, n, 3))
    return SpatialParams(np.asarray(t, float), np.asarray(r, float), s, np.asarray(a, float),
                         np.asarray(e, float))


def sample_intensity_params(rng: np.random.Generator, config: AugmentConfig) -> IntensityParams:
    shift = float(_uniform(rng, -config.intensity_shift, config.intensity_shift))
    scale = float(_uniform(rng, *config.intensity_scale))
    f = _uniform(rng, *config.label_factor, 2)
    return IntensityParams(shift, scale, {1: float(f[0]), 2: float(f[1])})


def rotation_matrix(angles) -> np.ndarray:
    ax, ay, az = angles
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def affine_matrix(params: SpatialParams) -> np.ndarray:
    return np.diag(params.aniso_scale) @ (params.iso_scale * rotation_matrix(params.rotation))


def _node_matrix(nodes: int, n: int) -> np.ndarray:
    """Linear interpolation weights from ``nodes`` evenly spread control points onto n voxels."""
    if nodes == 1:
        return np.ones((n, 1))
    pos = np.arange(n) * (nodes - 1) / max(n - 1, 1)
    i0 = np.minimum(np.floor(pos).astype(int), nodes - 2)
    t = pos - i0
    m = np.zeros((n, nodes))
    m[np.arange(n), i0] = 1 - t
    m[np.arange(n), i0 + 1] += t
    return m


def elastic_field(grid: np.ndarray, shape) -> np.ndarray:
    """Trilinear upsampling of a control grid (n, n, n, 3) to a (3, *shape) field."""
    mi, mj, mk = (_node_matrix(g, s) for g, s in zip(grid.shape[:3], shape))
    up = np.einsum("ia,jb,kc,abcd->dijk", mi, mj, mk, grid, optimize=True)
    return up


def build_displacement_field(params: SpatialParams, shape) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if params.is_identity():
        return np.zeros((3,) + shape)
    c = (np.asarray(shape, float) - 1) / 2.0
    grid = np.stack(np.meshgrid(*(np.arange(s, dtype=float) for s in shape), indexing="ij"))
    rel = grid - c.reshape(3, 1, 1, 1)
    a = affine_matrix(params)
    q = np.einsum("ij,j...->i...", a, rel) + c.reshape(3, 1, 1, 1)
    q += params.translation.reshape(3, 1, 1, 1)
    if params.elastic_grid.any():
        q += elastic_field(params.elastic_grid, shape)
    return q - grid


def warp_array(data: np.ndarray, field: np.ndarray, mode: str = "trilinear",
               origin=(0, 0, 0)) -> np.ndarray:
    """out[p] = data[origin + p + field[:, p]]; zero outside the input grid."""
    shape = field.shape[1:]
    origin = np.asarray(origin, dtype=int)
    if not field.any():
        # integer offset only: a plain copy, no interpolation blur
        from lacare.preprocess import CropSpec, crop_array
        center = origin + np.asarray(shape) // 2
        return crop_array(data, CropSpec(tuple(float(v) for v in center), tuple(shape)), 0)
    grid = np.stack(np.meshgrid(*(np.arange(s, dtype=float) for s in shape), indexing="ij"))
    coords = grid + field + origin.reshape(3, 1, 1, 1)
    return sample(data, coords, mode)


def warp(volume, field: np.ndarray, mode: str = "trilinear", origin=(0, 0, 0)):
    if isinstance(volume, LabelVolume):
        mode = "nearest"
    data = warp_array(volume.data, field, mode, origin)
    return type(volume)(volume.header.replace(dims=data.shape), data)


def apply_intensity(x: np.ndarray, labels: np.ndarray, params: IntensityParams) -> np.ndarray:
    out = x * np.float32(params.scale) + np.float32(params.shift)
    for label, f in params.per_label_factor.items():
        if f != 1.0:
            out = np.where(labels == label, out * np.float32(f), out)
    return out.astype(np.float32)


def intensity_augment(volume: Volume, labels: LabelVolume, rng: np.random.Generator,
                      config: AugmentConfig) -> Volume:
    params = sample_intensity_params(rng, config)
    return Volume(volume.header, apply_intensity(volume.data, labels.data, params))


def augment_training_crop(image: np.ndarray, labels: np.ndarray, origin, size,
                          rng: np.random.Generator, config: AugmentConfig):
    """Draw spatial then intensity parameters and produce one augmented crop pair."""
    size = tuple(int(s) for s in size)
    if config.enabled:
        sp = sample_spatial_params(rng, config)
        ip = sample_intensity_params(rng, config)
    else:
        sp, ip = SpatialParams.identity(config.elastic_nodes), IntensityParams()
    fld = build_displacement_field(sp, size)
    img = warp_array(image, fld, "trilinear", origin).astype(np.float32)
    lab = warp_array(labels, fld, "nearest", origin)
    return apply_intensity(img, lab, ip), lab
