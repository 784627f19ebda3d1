"""Cases prepared for the network: spacing-corrected, resampled, normalized.

A prepared case keeps the native header so predictions can be mapped back
with :func:`lacare.preprocess.restore_native`.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from lacare import preprocess as pp
from lacare.phantom import load_manifest
from lacare.volume_io import (LabelVolume, Volume, VolumeHeader, read_labels, read_volume,
                              write_labels, write_volume)

PREP_SCHEMA = 1
TARGET_SPACING = (0.8, 0.8, 0.8)


@dataclass
class PreparedCase:
    case_id: str
    image: np.ndarray  # float32, normalized, on the processing grid
    labels: np.ndarray | None  # uint8 on the processing grid, None if unknown
    native_header: VolumeHeader  # as stored in the input file
    processing_spacing: tuple[float, float, float]  # native spacing actually used
    spacing: tuple[float, float, float]  # processing grid spacing

    @property
    def centroid(self) -> tuple[float, float, float]:
        return pp.label_centroid(LabelVolume.from_array(self.labels), (1, 2))

    def placement(self, crop_size) -> pp.CropPlacement:
        """Placement of a crop at the scan center (inference)."""
        return pp.CropPlacement(pp.scan_center(self.image.shape), tuple(int(s) for s in crop_size),
                                self.image.shape, self.spacing, self.native_header.dims,
                                self.processing_spacing)


def prepare_case(case_id: str, image: Volume, labels: LabelVolume | None,
                 processing_header: VolumeHeader, target_spacing=TARGET_SPACING) -> PreparedCase:
    """Resample with the (possibly approximated) spacing in ``processing_header``, then normalize."""
    img = Volume(processing_header.replace(datatype="float32"), image.data)
    img = pp.robust_normalize(pp.resample(img, target_spacing, "trilinear"))
    lab = None
    if labels is not None:
        lv = LabelVolume(processing_header.replace(datatype="uint8"), labels.data)
        lab = pp.resample(lv, target_spacing).data
    return PreparedCase(case_id, img.data, lab, image.header, processing_header.spacing,
                        tuple(float(s) for s in target_spacing))


def reference_stats(manifest: dict, base_dir: str, split: str = "train") -> pp.SpacingStats:
    """Cohort statistics from the non-flagged headers of one split (all cases if empty)."""
    cases = [c for c in manifest["cases"] if c["split"] == split] or manifest["cases"]
    headers = [read_volume(os.path.join(base_dir, c["image_path"])).header for c in cases]
    return pp.spacing_stats(headers)


def prepare_manifest(manifest: dict, base_dir: str, ids=None, stats: pp.SpacingStats | None = None,
                     target_spacing=TARGET_SPACING, with_labels: bool = True):
    """Prepare the listed cases (all by default). Returns ``(cases, stats, headers_before, headers_after)``."""
    stats = stats or reference_stats(manifest, base_dir)
    entries = [c for c in manifest["cases"] if ids is None or c["id"] in set(ids)]
    images = [read_volume(os.path.join(base_dir, c["image_path"])) for c in entries]
    before = [v.header for v in images]
    stats_out, after = pp.apply_spacing(before, stats, [c["id"] for c in entries])
    cases = []
    for e, img, hdr in zip(entries, images, after):
        lab = read_labels(os.path.join(base_dir, e["label_path"])) if with_labels else None
        cases.append(prepare_case(e["id"], img, lab, hdr, target_spacing))
    return cases, stats_out, before, after


# -- on-disk prepared set ------------------------------------------------------

def save_prepared(out_dir, cases: list[PreparedCase], stats: pp.SpacingStats, splits: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for c in cases:
        hdr = VolumeHeader(c.image.shape, c.spacing, "float32")
        write_volume(Volume(hdr, c.image), os.path.join(out_dir, f"{c.case_id}_image.nii"))
        if c.labels is not None:
            write_labels(LabelVolume(hdr.replace(datatype="uint8"), c.labels),
                         os.path.join(out_dir, f"{c.case_id}_label.nii"))
        nh = c.native_header
        entries.append({"id": c.case_id, "split": splits.get(c.case_id, "train"),
                        "has_labels": c.labels is not None,
                        "native_dims": list(nh.dims), "native_spacing": list(nh.spacing),
                        "native_datatype": nh.datatype,
                        "processing_spacing": list(c.processing_spacing),
                        "spacing": list(c.spacing)})
    doc = {"schema_version": PREP_SCHEMA,
           "stats": {"mean_physical_size": list(stats.mean_physical_size),
                     "cohort_count": stats.cohort_count, "flagged": list(stats.flagged)},
           "cases": entries}
    with open(os.path.join(out_dir, "prepared.json"), "w") as f:
        json.dump(doc, f, indent=2)


def load_prepared(prep_dir, split: str | None = None, ids=None) -> list[PreparedCase]:
    with open(os.path.join(prep_dir, "prepared.json")) as f:
        doc = json.load(f)
    if doc.get("schema_version") != PREP_SCHEMA:
        raise ValueError(f"{prep_dir}: unsupported prepared-set schema {doc.get('schema_version')!r}")
    out = []
    for e in doc["cases"]:
        if split is not None and e["split"] != split:
            continue
        if ids is not None and e["id"] not in set(ids):
            continue
        img = read_volume(os.path.join(prep_dir, f"{e['id']}_image.nii"))
        lab = None
        if e["has_labels"]:
            lab = read_labels(os.path.join(prep_dir, f"{e['id']}_label.nii")).data
        nh = VolumeHeader(e["native_dims"], e["native_spacing"], e["native_datatype"])
        out.append(PreparedCase(e["id"], img.data, lab, nh, tuple(e["processing_spacing"]),
                                tuple(e["spacing"])))
    return out


def fold_split(ids: list[str], fold: int, folds: int) -> tuple[list[str], list[str]]:
    """Deterministic k-fold split by sorted id: ``(train_ids, held_out_ids)``."""
    if folds < 1 or not 0 <= fold < folds:
        raise ValueError(f"fold must lie in [0, {folds})")
    ids = sorted(ids)
    if folds == 1:
        return ids, []
    held = [c for i, c in enumerate(ids) if i % folds == fold]
    return [c for c in ids if c not in held], held
