"""Segmentation scores: voxel classification rates, Dice, generalized Dice,
and surface distances in millimetres.

Percent-valued metrics lie in [0, 100]. A metric whose denominator
vanishes is reported as NaN and named in the report's ``flags``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from lacare.volume_io import LabelVolume

CSV_COLUMNS = ("case_id", "task", "acc", "spe", "sen", "dsc", "gdsc", "assd_mm", "hd_mm", "flags")
METRIC_FIELDS = CSV_COLUMNS[2:9]
TASK_LABEL = {1: 2, 2: 1}  # task 1 scores scar, task 2 scores the atrium


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def confusion(pred, gt, region=None) -> ConfusionCounts:
    """Counts over ``region`` (default: every voxel)."""
    pred, gt = _pair(pred, gt)
    if region is not None:
        region = np.asarray(region, dtype=bool)
        pred, gt = pred[region], gt[region]
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, pred.size - tp - fp - fn, fp, fn)


def _ratio(num, den) -> float:
    return 100.0 * num / den if den else math.nan


def accuracy(c: ConfusionCounts) -> float:
    return _ratio(c.tp + c.tn, c.total)


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp)


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def dsc(pred, gt) -> tuple[float, bool]:
    """Dice in percent and a degenerate flag (both masks empty scores 100)."""
    pred, gt = _pair(pred, gt)
    den = np.count_nonzero(pred) + np.count_nonzero(gt)
    if den == 0:
        return 100.0, True
    return 200.0 * np.count_nonzero(pred & gt) / den, False


def gdsc(pred_labels, gt_labels, classes=(0, 2)) -> float:
    """Generalized Dice in percent, class weights 1/|G_l|^2; NaN if every class is empty.

    The default class set is {background, scar} on raw label maps.
    """
    p = np.asarray(pred_labels)
    g = np.asarray(gt_labels)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    num = den = 0.0
    for c in classes:
        gl = g == c
        ng = np.count_nonzero(gl)
        if ng == 0:
            continue
        pl = p == c
        w = 1.0 / float(ng) ** 2
        num += w * np.count_nonzero(pl & gl)
        den += w * (np.count_nonzero(pl) + ng)
    return 200.0 * num / den if den > 0 else math.nan


def surface_voxels(mask) -> np.ndarray:
    """(n, 3) indices of mask voxels with a 6-neighbor outside the mask or the grid."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    interior = m.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(p, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(m & ~interior)


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(d, dtype=np.float64)


def surface_distances(pred, gt, spacing):
    """Nearest-surface distances (mm) pred->gt and gt->pred, or None if a surface is empty."""
    pred, gt = _pair(pred, gt)
    sp = surface_voxels(pred) * np.asarray(spacing, dtype=np.float64)
    sg = surface_voxels(gt) * np.asarray(spacing, dtype=np.float64)
    if len(sp) == 0 or len(sg) == 0:
        return None
    return _directed(sp, sg), _directed(sg, sp)


def assd(pred, gt, spacing) -> float:
    d = surface_distances(pred, gt, spacing)
    if d is None:
        return math.nan
    return float(np.concatenate(d).mean())


def hd(pred, gt, spacing) -> float:
    d = surface_distances(pred, gt, spacing)
    if d is None:
        return math.nan
    return float(max(d[0].max(), d[1].max()))


@dataclass
class MetricsReport:
    case_id: str
    task: int
    acc: float
    spe: float
    sen: float
    dsc: float
    gdsc: float
    assd_mm: float
    hd_mm: float
    flags: list[str] = field(default_factory=list)

    def row(self) -> list[str]:
        vals = [_fmt(getattr(self, k)) for k in METRIC_FIELDS]
        return [self.case_id, str(self.task)] + vals + [";".join(self.flags)]


def _fmt(v: float) -> str:
    return "nan" if v is None or math.isnan(v) else f"{v:.4f}"


def evaluate_masks(pred, gt, spacing, case_id: str = "", task: int = 2,
                   region=None) -> MetricsReport:
    """Every metric on one binary target; G-DSC uses the classes {not target, target}."""
    pred, gt = _pair(pred, gt)
    c = confusion(pred, gt, region)
    d, degenerate = dsc(pred, gt)
    flags = ["dsc_both_empty"] if degenerate else []
    vals = {"acc": accuracy(c), "spe": specificity(c), "sen": sensitivity(c),
            "gdsc": gdsc(pred.astype(np.uint8), gt.astype(np.uint8), (0, 1))}
    dist = surface_distances(pred, gt, spacing)
    if dist is None:
        vals["assd_mm"] = vals["hd_mm"] = math.nan
    else:
        vals["assd_mm"] = float(np.concatenate(dist).mean())
        vals["hd_mm"] = float(max(dist[0].max(), dist[1].max()))
    for k, v in vals.items():
        if math.isnan(v):
            flags.append(f"{k}_undefined")
    return MetricsReport(case_id, task, vals["acc"], vals["spe"], vals["sen"], d,
                         vals["gdsc"], vals["assd_mm"], vals["hd_mm"], flags)


def evaluate_case(pred: LabelVolume, gt: LabelVolume, task: int, case_id: str = "",
                  region=None) -> MetricsReport:
    """Task 1 scores the scar label (2), task 2 the atrium label (1), on the gt grid."""
    if task not in TASK_LABEL:
        raise ValueError(f"task must be 1 or 2, got {task}")
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"grid mismatch: pred {pred.data.shape} vs gt {gt.data.shape}")
    if not np.allclose(pred.spacing, gt.spacing, rtol=1e-6, atol=0):
        raise ValueError(f"spacing mismatch: pred {pred.spacing} vs gt {gt.spacing}")
    lab = TASK_LABEL[task]
    return evaluate_masks(pred.data == lab, gt.data == lab, gt.spacing, case_id, task, region)


def aggregate(reports: list[MetricsReport]) -> list[MetricsReport]:
    """Mean and (population) std rows per task, ignoring NaN entries."""
    out = []
    for task in sorted({r.task for r in reports}):
        rows = [r for r in reports if r.task == task]
        stats = {}
        for k in METRIC_FIELDS:
            v = np.array([getattr(r, k) for r in rows], dtype=np.float64)
            v = v[~np.isnan(v)]
            stats[k] = (float(v.mean()), float(v.std())) if v.size else (math.nan, math.nan)
        for i, name in enumerate(("mean", "std")):
            out.append(MetricsReport(name, task, *(stats[k][i] for k in METRIC_FIELDS)))
    return out


def write_metrics_csv(path, reports: list[MetricsReport], with_aggregate: bool = True) -> None:
    rows = list(reports) + (aggregate(reports) if with_aggregate and reports else [])
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.row())


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
