"""Single-file NIfTI-1 subset: 352-byte header, raw little-endian payload.

Only the fields needed to carry a 3D grid and its voxel size are read or
written (sizeof_hdr, dim, datatype, bitpix, pixdim[1..3], vox_offset,
scl_slope, scl_inter, magic). Orientation matrices are ignored and written
as zero. Arrays are indexed ``[i, j, k]`` with ``i`` fastest on disk.

Voxel sizes are stored as float32, so a spacing survives a round trip
exactly when it is representable in float32; read values are the stored
float32 numbers widened to Python floats.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DATATYPES = {
    "uint8": (2, 8, np.dtype("<u1")),
    "int16": (4, 16, np.dtype("<i2")),
    "float32": (16, 32, np.dtype("<f4")),
}
_BY_CODE = {code: (name, bitpix, dt) for name, (code, bitpix, dt) in DATATYPES.items()}

LABEL_VALUES = (0, 1, 2)


class VolumeIOError(ValueError):
    """Base class for volume file problems."""


class VolumeFormatError(VolumeIOError):
    """Not a single-file little-endian NIfTI-1 image."""


class UnsupportedDatatypeError(VolumeIOError):
    pass


class CorruptVolumeError(VolumeIOError):
    """Payload shorter than the header promises."""


class LabelValueError(VolumeIOError):
    """Label map holds values outside {0, 1, 2}."""


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    datatype: str = "float32"
    scale_slope: float = 1.0
    scale_intercept: float = 0.0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        if self.datatype not in DATATYPES:
            raise UnsupportedDatatypeError(f"datatype {self.datatype!r} not in {sorted(DATATYPES)}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    def replace(self, **changes) -> "VolumeHeader":
        fields = dict(dims=self.dims, spacing=self.spacing, datatype=self.datatype,
                      scale_slope=self.scale_slope, scale_intercept=self.scale_intercept)
        fields.update(changes)
        return VolumeHeader(**fields)


@dataclass
class Volume:
    header: VolumeHeader
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape != self.header.dims:
            raise ValueError(f"data shape {self.data.shape} does not match dims {self.header.dims}")

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.header.spacing

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), datatype="float32") -> "Volume":
        data = np.asarray(data, dtype=np.float32)
        return cls(VolumeHeader(data.shape, spacing, datatype), data)


@dataclass
class LabelVolume:
    header: VolumeHeader
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape != self.header.dims:
            raise ValueError(f"data shape {self.data.shape} does not match dims {self.header.dims}")
        _check_labels(self.data)
        self.data = self.data.astype(np.uint8, copy=False)

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.header.spacing

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0)) -> "LabelVolume":
        data = np.asarray(data)
        return cls(VolumeHeader(data.shape, spacing, "uint8"), data)


def _check_labels(data: np.ndarray) -> None:
    bad = ~np.isin(data, LABEL_VALUES)
    if bad.any():
        raise LabelValueError(f"label values outside {{0,1,2}}: {sorted(set(np.unique(data[bad]).tolist()))}")


# -- header packing ----------------------------------------------------------

def _pack_header(header: VolumeHeader) -> bytes:
    code, bitpix, _ = DATATYPES[header.datatype]
    buf = bytearray(VOX_OFFSET)
    struct.pack_into("<i", buf, 0, HEADER_SIZE)
    struct.pack_into("<8h", buf, 40, 3, *header.dims, 1, 1, 1, 1)
    struct.pack_into("<hh", buf, 70, code, bitpix)
    struct.pack_into("<8f", buf, 76, 0.0, *header.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<fff", buf, 108, float(VOX_OFFSET), 1.0, 0.0)
    buf[344:348] = MAGIC
    return bytes(buf)


def _unpack_header(raw: bytes, path) -> tuple[VolumeHeader, int]:
    if len(raw) < HEADER_SIZE:
        raise VolumeFormatError(f"{path}: file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise VolumeFormatError(f"{path}: sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE} "
                                "(not NIfTI-1 or not little-endian)")
    if raw[344:348] != MAGIC:
        raise VolumeFormatError(f"{path}: magic {raw[344:348]!r} is not single-file n+1")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] < 3 or any(d != 1 for d in dim[4:dim[0] + 1]):
        raise VolumeFormatError(f"{path}: only 3D images are supported, dim={dim}")
    code, _bitpix = struct.unpack_from("<hh", raw, 70)
    if code not in _BY_CODE:
        raise UnsupportedDatatypeError(f"{path}: datatype code {code} not supported")
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset, slope, inter = struct.unpack_from("<fff", raw, 108)
    offset = max(int(vox_offset), VOX_OFFSET)
    try:
        header = VolumeHeader(dim[1:4], pixdim[1:4], _BY_CODE[code][0], slope, inter)
    except UnsupportedDatatypeError:
        raise
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from exc
    return header, offset


def _read_raw(path) -> tuple[VolumeHeader, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    header, offset = _unpack_header(blob, path)
    dt = DATATYPES[header.datatype][2]
    count = int(np.prod(header.dims))
    if len(blob) < offset + count * dt.itemsize:
        raise CorruptVolumeError(f"{path}: payload holds {len(blob) - offset} bytes, "
                                 f"expected {count * dt.itemsize}")
    flat = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
    return header, flat.reshape(header.dims, order="F")


def _write_raw(path, header: VolumeHeader, data: np.ndarray) -> None:
    dt = DATATYPES[header.datatype][2]
    with open(path, "wb") as f:
        f.write(_pack_header(header))
        f.write(np.asarray(data, dtype=dt).tobytes(order="F"))


def _cast_exact(data: np.ndarray, datatype: str) -> np.ndarray:
    dt = DATATYPES[datatype][2]
    out = data.astype(dt)
    if not np.array_equal(out.astype(np.float64), data.astype(np.float64)):
        raise ValueError(f"data is not exactly representable as {datatype}")
    return out


# -- public API --------------------------------------------------------------

def read_volume(path) -> Volume:
    """Load an image; intensities are mapped through scl_slope/scl_inter."""
    header, raw = _read_raw(path)
    data = raw.astype(np.float32)
    slope, inter = header.scale_slope, header.scale_intercept
    if slope != 0 and (slope != 1 or inter != 0):
        data = (data * np.float32(slope) + np.float32(inter)).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise CorruptVolumeError(f"{path}: non-finite intensities")
    return Volume(header.replace(scale_slope=1.0, scale_intercept=0.0), data)


def write_volume(volume: Volume, path) -> None:
    """Write ``volume`` with its header datatype (float32 unless set otherwise)."""
    data = np.asarray(volume.data)
    if not np.all(np.isfinite(data)):
        raise ValueError("volume contains NaN or Inf; refusing to write")
    header = volume.header.replace(scale_slope=1.0, scale_intercept=0.0)
    _write_raw(os.fspath(path), header, _cast_exact(data, header.datatype))


def read_labels(path) -> LabelVolume:
    header, raw = _read_raw(path)
    slope, inter = header.scale_slope, header.scale_intercept
    if slope != 0 and (slope != 1 or inter != 0):
        raw = raw * slope + inter
    _check_labels(raw)
    return LabelVolume(header.replace(datatype="uint8", scale_slope=1.0, scale_intercept=0.0),
                       raw.astype(np.uint8))


def write_labels(labels: LabelVolume, path) -> None:
    _check_labels(labels.data)
    header = labels.header.replace(datatype="uint8", scale_slope=1.0, scale_intercept=0.0)
    _write_raw(os.fspath(path), header, labels.data.astype(np.uint8))
