"""Synthetic LGE-like phantoms with known ground truth.

A phantom is an ellipsoidal blood pool (label 1) inside a wall shell of
constant thickness. A few angular sectors of the shell are marked as scar
(label 2) and drawn brighter than everything else. The background carries
a smooth low-frequency texture so intensity percentiles are informative,
and Gaussian noise is added last.

Geometry is defined in millimetres about the grid center, so the same
config rendered at two spacings describes the same object.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from lacare.rng import stream
from lacare.volume_io import LabelVolume, Volume, VolumeHeader, write_labels, write_volume

MANIFEST_SCHEMA = 1
DOMAIN_SHIFTS = ("none", "intensity", "resolution")
# grids sharing one 44.8 x 44.8 x 67.2 mm field of view
RESOLUTION_GRIDS = (((64, 64, 48), (0.7, 0.7, 1.4)), ((56, 56, 56), (0.8, 0.8, 1.2)))


class PhantomConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    grid: tuple[int, int, int] = (64, 64, 48)
    native_spacing: tuple[float, float, float] = (0.7, 0.7, 1.4)
    semi_axes: tuple[float, float, float] = (8.0, 8.0, 12.0)  # cavity, mm
    wall_thickness: float = 2.8
    scar_patch_count: int = 3
    scar_arc_extent: float = 1.0  # full opening angle of one patch, radians
    background: float = 100.0
    wall: float = 200.0
    cavity: float = 300.0
    scar: float = 450.0
    texture: float = 30.0  # amplitude of the smooth background field
    noise_sigma: float = 15.0
    center_jitter: float = 2.0  # mm, per axis
    max_rotation: float = 0.3  # radians, per axis
    contrast: float = 1.0  # global gain about the background level
    erase_spacing: bool = False
    seed: int = 0

    def validate(self) -> None:
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise PhantomConfigError(f"grid must be three positive ints, got {self.grid}")
        if min(self.native_spacing) <= 0 or min(self.semi_axes) <= 0 or self.wall_thickness <= 0:
            raise PhantomConfigError("spacing, semi-axes and wall thickness must be positive")
        if not self.background < self.wall < self.cavity < self.scar:
            raise PhantomConfigError("intensities must satisfy background < wall < cavity < scar")
        if self.noise_sigma < 0 or self.texture < 0 or self.contrast <= 0:
            raise PhantomConfigError("noise, texture and contrast must be non-negative/positive")
        # the rotated outer shell plus jitter must stay inside the field of view
        half = np.multiply(self.grid, self.native_spacing) / 2.0
        reach = max(self.semi_axes) + self.wall_thickness + self.center_jitter
        if np.any(reach >= half):
            raise PhantomConfigError(f"object reach {reach:.2f} mm exceeds half field of view {half}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PhantomGeometry:
    center: np.ndarray  # mm offset from the grid center
    rotation: np.ndarray  # 3x3, object frame -> grid frame
    semi_axes: np.ndarray
    wall_thickness: float
    scar_directions: np.ndarray  # (n, 3) unit vectors in the normalized object frame
    scar_half_angle: float

    def object_coords(self, points_mm: np.ndarray) -> np.ndarray:
        """Map (..., 3) grid-frame mm offsets from the grid center into the object frame."""
        return (points_mm - self.center) @ self.rotation

    def cavity_mask(self, q: np.ndarray) -> np.ndarray:
        return np.sum((q / self.semi_axes) ** 2, axis=-1) <= 1.0

    def outer_mask(self, q: np.ndarray) -> np.ndarray:
        return np.sum((q / (self.semi_axes + self.wall_thickness)) ** 2, axis=-1) <= 1.0

    def scar_sector(self, q: np.ndarray) -> np.ndarray:
        if len(self.scar_directions) == 0:
            return np.zeros(q.shape[:-1], dtype=bool)
        u = q / self.semi_axes
        n = np.linalg.norm(u, axis=-1, keepdims=True)
        u = np.divide(u, n, out=np.zeros_like(u), where=n > 0)
        cos = u @ self.scar_directions.T
        return np.any(cos >= np.cos(self.scar_half_angle), axis=-1)


def _rotation(angles) -> np.ndarray:
    ax, ay, az = angles
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def phantom_geometry(config: PhantomConfig) -> PhantomGeometry:
    """The random geometry a config renders, drawn from its seed alone."""
    rng = stream(config.seed, "phantom-geometry")
    center = rng.uniform(-config.center_jitter, config.center_jitter, 3)
    rot = _rotation(rng.uniform(-config.max_rotation, config.max_rotation, 3))
    dirs = rng.standard_normal((config.scar_patch_count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return PhantomGeometry(center, rot, np.asarray(config.semi_axes, float),
                           float(config.wall_thickness), dirs, config.scar_arc_extent / 2.0)


def voxel_offsets_mm(grid, spacing) -> np.ndarray:
    """(X, Y, Z, 3) physical offsets of voxel centers from the grid center."""
    axes = [(np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(grid, spacing)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _texture(rng: np.random.Generator, pts: np.ndarray, amplitude: float) -> np.ndarray:
    """Sum of a few random plane waves with wavelengths of 20 to 60 mm."""
    field = np.zeros(pts.shape[:-1])
    if amplitude == 0:
        return field
    for _ in range(4):
        k = rng.standard_normal(3)
        k *= 2 * np.pi / (np.linalg.norm(k) * rng.uniform(20.0, 60.0))
        field += np.sin(pts @ k + rng.uniform(0, 2 * np.pi))
    return amplitude * field / 2.0


def generate_phantom(config: PhantomConfig) -> tuple[Volume, LabelVolume]:
    config.validate()
    geo = phantom_geometry(config)
    pts = voxel_offsets_mm(config.grid, config.native_spacing)
    q = geo.object_coords(pts)
    cavity = geo.cavity_mask(q)
    shell = geo.outer_mask(q) & ~cavity
    scar = shell & geo.scar_sector(q)

    labels = np.zeros(config.grid, dtype=np.uint8)
    labels[cavity] = 1
    labels[scar] = 2

    rng = stream(config.seed, "phantom-intensity")
    img = config.background + _texture(rng, pts, config.texture)
    img[shell] = config.wall
    img[cavity] = config.cavity
    img[scar] = config.scar
    img = config.background + config.contrast * (img - config.background)
    if config.noise_sigma > 0:
        img += rng.normal(0.0, config.noise_sigma * config.contrast, img.shape)

    spacing = (1.0, 1.0, 1.0) if config.erase_spacing else config.native_spacing
    img_h = VolumeHeader(config.grid, spacing, "float32")
    return (Volume(img_h, img.astype(np.float32)),
            LabelVolume(img_h.replace(datatype="uint8"), labels))


def cohort_configs(seed: int, n: int, domain_shift: str = "none", erase_fraction: float = 0.25,
                   base: PhantomConfig | None = None) -> list[PhantomConfig]:
    """Per-case configs: varied geometry, optional domain shift, some erased headers."""
    if n < 1:
        raise ValueError("cohort size must be at least 1")
    if domain_shift not in DOMAIN_SHIFTS:
        raise ValueError(f"domain_shift must be one of {DOMAIN_SHIFTS}, got {domain_shift!r}")
    if not 0.0 <= erase_fraction <= 1.0:
        raise ValueError("erase_fraction must lie in [0, 1]")
    base = base or PhantomConfig()
    n_erase = int(np.floor(n * erase_fraction + 0.5))
    erased = set(stream(seed, "cohort-erase").permutation(n)[:n_erase].tolist())
    out = []
    for i in range(n):
        rng = stream(seed, "cohort-case", i)
        axes = tuple(float(a) for a in np.asarray(base.semi_axes) * rng.uniform(0.85, 1.15, 3))
        cfg = replace(base, semi_axes=axes, scar_patch_count=int(rng.integers(2, 5)),
                      seed=int(rng.integers(0, 2 ** 31)), erase_spacing=i in erased)
        if domain_shift == "intensity":
            cfg = replace(cfg, contrast=float(rng.uniform(0.6, 1.6)))
        elif domain_shift == "resolution":
            grid, spacing = RESOLUTION_GRIDS[i % len(RESOLUTION_GRIDS)]
            cfg = replace(cfg, grid=grid, native_spacing=spacing)
        out.append(cfg)
    return out


def generate_cohort(seed: int, n: int, out_dir, domain_shift: str = "none",
                    erase_fraction: float = 0.25, n_test: int = 0,
                    base: PhantomConfig | None = None) -> dict:
    """Write ``n`` phantoms plus ``manifest.json`` into ``out_dir``; return the manifest.

    The last ``n_test`` cases are marked ``split = "test"``, the rest ``"train"``.
    """
    if not 0 <= n_test <= n:
        raise ValueError("n_test must lie in [0, n]")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, cfg in enumerate(cohort_configs(seed, n, domain_shift, erase_fraction, base)):
        cid = f"case_{i:03d}"
        img, lab = generate_phantom(cfg)
        write_volume(img, os.path.join(out_dir, f"{cid}_image.nii"))
        write_labels(lab, os.path.join(out_dir, f"{cid}_label.nii"))
        entries.append({
            "id": cid,
            "image_path": f"{cid}_image.nii",
            "label_path": f"{cid}_label.nii",
            "true_spacing": list(cfg.native_spacing),
            "header_spacing": list(img.spacing),
            "split": "test" if i >= n - n_test else "train",
        })
    manifest = {"schema_version": MANIFEST_SCHEMA, "seed": seed, "domain_shift": domain_shift,
                "cases": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


class ManifestError(ValueError):
    pass


def load_manifest(path) -> tuple[dict, str]:
    """Return ``(manifest, base_dir)`` after validating the schema."""
    path = os.fspath(path)
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    try:
        with open(path) as f:
            m = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if m.get("schema_version") != MANIFEST_SCHEMA:
        raise ManifestError(f"{path}: unsupported schema_version {m.get('schema_version')!r}")
    keys = {"id", "image_path", "label_path", "true_spacing", "header_spacing", "split"}
    ids = set()
    for e in m.get("cases", []):
        missing = keys - set(e)
        if missing:
            raise ManifestError(f"{path}: entry {e.get('id')!r} lacks {sorted(missing)}")
        if e["id"] in ids:
            raise ManifestError(f"{path}: duplicate id {e['id']!r}")
        ids.add(e["id"])
    if not ids:
        raise ManifestError(f"{path}: no cases")
    return m, os.path.dirname(os.path.abspath(path))
