"""Morphological cleanup of predicted label maps.

The atrium prediction is dilated, merged with the scar prediction, and
everything outside the largest connected blob of that union is dropped.
Dilation and component labeling are delegated to scipy.ndimage.
"""
from __future__ import annotations

import warnings

import numpy as np
from scipy import ndimage

from lacare.volume_io import LabelVolume, VolumeHeader


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 26:
        return np.ones((3, 3, 3), dtype=bool)
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def dilate(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Binary dilation with the full 3x3x3 neighborhood, ``iterations`` times."""
    mask = np.asarray(mask, dtype=bool)
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    if iterations == 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=_structure(26), iterations=iterations)


def connected_components(mask: np.ndarray, connectivity: int = 26):
    """Return ``(labels, sizes)``; labels are 1..n, ``sizes[k-1]`` counts component k."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_structure(connectivity))
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels, sizes


def largest_component(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Mask of the largest component; ties go to the one found first in scan order."""
    labels, sizes = connected_components(mask, connectivity)
    if sizes.size == 0:
        return np.zeros(np.shape(mask), dtype=bool)
    return labels == int(np.argmax(sizes)) + 1


def filter_disconnected(la: np.ndarray, scar: np.ndarray, iterations: int = 1,
                        connectivity: int = 26):
    """Keep only voxels of ``la`` and ``scar`` inside the largest blob of dilate(la) | scar."""
    la = np.asarray(la, dtype=bool)
    scar = np.asarray(scar, dtype=bool)
    if la.shape != scar.shape:
        raise ValueError(f"mask shapes differ: {la.shape} vs {scar.shape}")
    union = dilate(la, iterations) | scar
    if not union.any():
        warnings.warn("empty prediction; nothing to filter", RuntimeWarning, stacklevel=2)
        return la.copy(), scar.copy()
    keep = largest_component(union, connectivity)
    return la & keep, scar & keep


def compose_labels(la: np.ndarray, scar: np.ndarray, header: VolumeHeader | None = None):
    """2 where scar, else 1 where la, else 0. Returns a LabelVolume when ``header`` is given."""
    la = np.asarray(la, dtype=bool)
    scar = np.asarray(scar, dtype=bool)
    if la.shape != scar.shape:
        raise ValueError(f"mask shapes differ: {la.shape} vs {scar.shape}")
    out = np.zeros(la.shape, dtype=np.uint8)
    out[la] = 1
    out[scar] = 2
    if header is None:
        return out
    return LabelVolume(header.replace(dims=out.shape, datatype="uint8"), out)


def postprocess_labels(labels: np.ndarray, iterations: int = 1, connectivity: int = 26) -> np.ndarray:
    """Split a composed label map, filter it, and compose it again."""
    la, scar = filter_disconnected(labels == 1, labels == 2, iterations, connectivity)
    return compose_labels(la, scar)
