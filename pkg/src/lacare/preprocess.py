"""Deterministic preprocessing applied before the network.

Spacing approximation for scans whose header reports the 1 mm default,
isotropic resampling, percentile normalization, centroid-based and
scan-centered cropping, and the inverse chain that maps a prediction back
onto the native grid.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from lacare.volume_io import LabelVolume, Volume, VolumeHeader

DEFAULT_FLAG_SPACING = (1.0, 1.0, 1.0)


class CohortError(ValueError):
    """No scan with trustworthy spacing to derive the reference size from."""


class EmptyMaskError(ValueError):
    pass


class PlacementError(ValueError):
    pass


# -- spacing approximation ---------------------------------------------------

@dataclass
class SpacingStats:
    mean_physical_size: tuple[float, float, float]
    cohort_count: int
    flagged: list[str] = field(default_factory=list)
    original_spacing: dict[str, tuple[float, float, float]] = field(default_factory=dict)


def is_flagged(header: VolumeHeader) -> bool:
    return tuple(header.spacing) == DEFAULT_FLAG_SPACING


def spacing_stats(headers: list[VolumeHeader]) -> SpacingStats:
    """Mean physical extent (dims * spacing) per axis over non-flagged headers."""
    ref = [h for h in headers if not is_flagged(h)]
    if not ref:
        raise CohortError("every scan reports 1 mm spacing; no reference physical size")
    sizes = np.array([np.multiply(h.dims, h.spacing) for h in ref], dtype=np.float64)
    m = sizes.mean(axis=0)
    return SpacingStats(tuple(float(v) for v in m), len(ref))


def apply_spacing(headers: list[VolumeHeader], stats: SpacingStats,
                  ids: list[str] | None = None) -> tuple[SpacingStats, list[VolumeHeader]]:
    """Replace flagged spacings by mean_physical_size / dims using precomputed stats."""
    ids = [str(i) for i in range(len(headers))] if ids is None else [str(i) for i in ids]
    out = SpacingStats(stats.mean_physical_size, stats.cohort_count,
                       list(stats.flagged), dict(stats.original_spacing))
    result = []
    for sid, h in zip(ids, headers):
        if is_flagged(h):
            s = tuple(float(m / v) for m, v in zip(stats.mean_physical_size, h.dims))
            out.flagged.append(sid)
            out.original_spacing[sid] = h.spacing
            result.append(h.replace(spacing=s))
        else:
            result.append(h)
    return out, result


def approximate_spacing(headers: list[VolumeHeader], ids: list[str] | None = None,
                        reference: SpacingStats | None = None
                        ) -> tuple[SpacingStats, list[VolumeHeader]]:
    """Approximate the spacing of scans flagged as having default (1,1,1) mm.

    The reference size comes from ``reference`` when given (e.g. the
    training cohort), otherwise from the non-flagged members of ``headers``.
    The original spacing of every flagged scan is kept in the returned stats
    so it can be written back at output time.
    """
    stats = reference if reference is not None else spacing_stats(headers)
    return apply_spacing(headers, stats, ids)


def write_spacing_report(path, ids, before: list[VolumeHeader], after: list[VolumeHeader]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scan_id", "original_spacing", "approximated_spacing", "flagged"])
        for sid, b, a in zip(ids, before, after):
            w.writerow([sid, " ".join(repr(s) for s in b.spacing),
                        " ".join(repr(s) for s in a.spacing), int(is_flagged(b))])


# -- sampling ----------------------------------------------------------------

def sample(data: np.ndarray, coords: np.ndarray, mode: str = "trilinear") -> np.ndarray:
    """Sample ``data`` at fractional voxel coordinates ``coords`` (shape (3, ...)).

    Trilinear mode treats voxels outside the grid as 0, so a coordinate at
    or beyond one voxel past the border yields exactly 0. Nearest mode
    rounds half up and returns 0 outside the grid.
    """
    shape = np.array(data.shape).reshape(3, *([1] * (coords.ndim - 1)))
    if mode == "nearest":
        idx = np.floor(coords + 0.5).astype(np.intp)
        valid = np.all((idx >= 0) & (idx < shape), axis=0)
        idx = np.clip(idx, 0, shape - 1)
        out = data[idx[0], idx[1], idx[2]]
        return np.where(valid, out, np.zeros((), dtype=data.dtype))
    if mode != "trilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    i0 = np.floor(coords).astype(np.intp)
    t = (coords - i0).astype(np.float64)
    out = np.zeros(coords.shape[1:], dtype=np.float64)
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1]).reshape(shape.shape)
        idx = i0 + off
        valid = np.all((idx >= 0) & (idx < shape), axis=0)
        wt = np.prod(np.where(off == 1, t, 1.0 - t), axis=0)
        idx = np.clip(idx, 0, shape - 1)
        out += np.where(valid, wt * data[idx[0], idx[1], idx[2]], 0.0)
    return out.astype(data.dtype if data.dtype.kind == "f" else np.float32)


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(int)


def _grid_coords(out_dims, out_spacing, in_dims, in_spacing) -> np.ndarray:
    """Input voxel coordinates of every output voxel center, grids center-aligned."""
    axes = []
    for m, so, n, si in zip(out_dims, out_spacing, in_dims, in_spacing):
        j = np.arange(m, dtype=np.float64)
        axes.append((j - (m - 1) / 2.0) * (so / si) + (n - 1) / 2.0)
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def resample_to_grid(data: np.ndarray, in_spacing, out_dims, out_spacing,
                     mode: str = "trilinear") -> np.ndarray:
    out_dims = tuple(int(d) for d in out_dims)
    if tuple(out_dims) == data.shape and tuple(out_spacing) == tuple(in_spacing):
        return data.copy()
    coords = _grid_coords(out_dims, out_spacing, data.shape, in_spacing)
    return sample(data, coords, mode)


def resampled_dims(dims, spacing, target_spacing) -> tuple[int, int, int]:
    return tuple(max(1, int(d)) for d in
                 _round_half_up(np.multiply(dims, spacing) / np.asarray(target_spacing, float)))


def resample(volume, target_spacing, mode: str = "trilinear"):
    """Resample onto a grid with ``target_spacing``; works for Volume and LabelVolume."""
    target = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target):
        raise ValueError(f"target spacing must be positive, got {target}")
    if isinstance(volume, LabelVolume):
        mode = "nearest"
    dims = resampled_dims(volume.header.dims, volume.spacing, target)
    data = resample_to_grid(volume.data, volume.spacing, dims, target, mode)
    header = volume.header.replace(dims=dims, spacing=target)
    return type(volume)(header, data)


# -- intensity normalization -------------------------------------------------

def robust_normalize(volume: Volume, p_low: float = 10, p_high: float = 90) -> Volume:
    """Affine map sending the p_low percentile to -1 and p_high to +1 (no clipping)."""
    x = np.asarray(volume.data, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalize an empty volume")
    lo, hi = np.percentile(x, [p_low, p_high])
    if hi == lo:
        warnings.warn("percentiles coincide; constant image normalized to zeros", RuntimeWarning,
                      stacklevel=2)
        out = np.zeros_like(x)
    else:
        out = (x - (hi + lo) / 2.0) * (2.0 / (hi - lo))
    return Volume(volume.header.replace(datatype="float32"), out.astype(np.float32))


# -- cropping ----------------------------------------------------------------

def label_centroid(labels: LabelVolume, label_set=(1, 2)) -> tuple[float, float, float]:
    mask = np.isin(labels.data, list(label_set))
    if not mask.any():
        raise EmptyMaskError(f"no voxel carries a label in {set(label_set)}")
    return tuple(float(c.mean()) for c in np.nonzero(mask))


@dataclass(frozen=True)
class CropSpec:
    center: tuple[float, float, float]
    size: tuple[int, int, int]

    def origin(self) -> tuple[int, int, int]:
        """Input index of output voxel (0, 0, 0)."""
        return tuple(int(c) - s // 2 for c, s in zip(_round_half_up(self.center), self.size))

    def check_divisible(self, levels: int) -> None:
        f = 2 ** (levels - 1)
        if any(s % f for s in self.size):
            raise ValueError(f"crop size {self.size} not divisible by {f} for a {levels}-level U-Net")


def _window(origin, size, dims):
    src, dst = [], []
    for o, s, n in zip(origin, size, dims):
        lo, hi = max(o, 0), min(o + s, n)
        if hi <= lo:
            return None
        src.append(slice(lo, hi))
        dst.append(slice(lo - o, hi - o))
    return tuple(src), tuple(dst)


def crop_array(data: np.ndarray, spec: CropSpec, fill=0) -> np.ndarray:
    out = np.full(spec.size, fill, dtype=data.dtype)
    win = _window(spec.origin(), spec.size, data.shape)
    if win is not None:
        out[win[1]] = data[win[0]]
    return out


def uncrop_array(data: np.ndarray, spec: CropSpec, dims, fill=0) -> np.ndarray:
    out = np.full(tuple(dims), fill, dtype=data.dtype)
    win = _window(spec.origin(), spec.size, dims)
    if win is not None:
        out[win[0]] = data[win[1]]
    return out


def crop(volume, spec: CropSpec, fill=0):
    data = crop_array(volume.data, spec, fill)
    return type(volume)(volume.header.replace(dims=data.shape), data)


def scan_center(dims) -> tuple[float, float, float]:
    return tuple((d - 1) / 2.0 for d in dims)


# -- placement and restore ---------------------------------------------------

@dataclass
class CropPlacement:
    """Everything needed to map a crop-grid prediction back to the native scan."""
    crop_center: tuple[float, float, float]
    crop_size: tuple[int, int, int]
    resampled_dims: tuple[int, int, int]
    resampled_spacing: tuple[float, float, float]
    native_dims: tuple[int, int, int]
    processing_spacing: tuple[float, float, float]  # native spacing used (may be approximated)

    @property
    def spec(self) -> CropSpec:
        return CropSpec(tuple(self.crop_center), tuple(self.crop_size))

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CropPlacement":
        return cls(tuple(float(v) for v in d["crop_center"]), tuple(int(v) for v in d["crop_size"]),
                   tuple(int(v) for v in d["resampled_dims"]),
                   tuple(float(v) for v in d["resampled_spacing"]),
                   tuple(int(v) for v in d["native_dims"]),
                   tuple(float(v) for v in d["processing_spacing"]))


def restore_native(pred: LabelVolume, native_header: VolumeHeader,
                   placement: CropPlacement | None) -> LabelVolume:
    """Uncrop, map back to the native voxel grid (nearest) and restore the header.

    The returned header carries ``native_header.spacing``, i.e. the spacing
    originally stored in the file, even when processing used an
    approximated spacing.
    """
    if placement is None:
        raise PlacementError("no crop placement recorded for this prediction")
    if tuple(pred.data.shape) != tuple(placement.crop_size):
        raise PlacementError(f"prediction shape {pred.data.shape} != crop size {placement.crop_size}")
    full = uncrop_array(pred.data, placement.spec, placement.resampled_dims, 0)
    native = resample_to_grid(full, placement.resampled_spacing, placement.native_dims,
                              placement.processing_spacing, "nearest")
    header = native_header.replace(dims=placement.native_dims, datatype="uint8",
                                   scale_slope=1.0, scale_intercept=0.0)
    return LabelVolume(header, native)


def physical_volume(mask: np.ndarray, spacing) -> float:
    """Mask volume in mm^3."""
    return float(np.count_nonzero(mask) * math.prod(spacing))
