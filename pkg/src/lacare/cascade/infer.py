"""Prediction with single models and ensembles.

Every member runs with its EMA weights and dropout off; the ensemble output
is the voxelwise mean of the members' softmax outputs.
"""
from __future__ import annotations

import numpy as np

from lacare.cascade.model import CascadeModel, ConfigurationError, forward_cascade
from lacare.dataset import PreparedCase
from lacare.nn import ops
from lacare.postprocess import compose_labels, filter_disconnected
from lacare.preprocess import CropPlacement, crop_array, restore_native
from lacare.volume_io import LabelVolume


def predict(models, image: np.ndarray, weights: str = "ema"):
    """Mean softmax ``(probs1, probs2)`` over ``models`` for a (D, H, W) or (B, 1, D, H, W) image.

    ``probs2`` is None for stage1_only models. Mixing task modes raises
    :class:`ConfigurationError`.
    """
    if isinstance(models, CascadeModel):
        models = [models]
    models = list(models)
    if not models:
        raise ConfigurationError("no models to predict with")
    modes = {m.task_mode for m in models}
    if len(modes) > 1:
        raise ConfigurationError(f"ensemble mixes task modes {sorted(modes)}")
    x = np.asarray(image)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None, None]
    # float64 accumulation keeps the mean of identical members exact after the cast back
    sum1 = sum2 = None
    dtype = models[0].stage1.params["head.w"].dtype
    for m in models:
        m.unet.check_input(x.shape[2:])
        l1, l2 = forward_cascade(m, x.astype(m.stage1.params["head.w"].dtype), False, None, weights)
        p1 = ops.softmax_channels(l1).astype(np.float64)
        sum1 = p1 if sum1 is None else sum1 + p1
        if l2 is not None:
            p2 = ops.softmax_channels(l2).astype(np.float64)
            sum2 = p2 if sum2 is None else sum2 + p2
    n = len(models)
    p1 = (sum1 / n).astype(dtype)
    p2 = None if sum2 is None else (sum2 / n).astype(dtype)
    if squeeze:
        p1 = p1[0]
        p2 = None if p2 is None else p2[0]
    return p1, p2


def compose_prediction(probs1: np.ndarray, probs2: np.ndarray | None) -> np.ndarray:
    """Scar where argmax(probs2) = 1, else atrium where argmax(probs1) = 1, else 0.

    Channel axis first, i.e. arrays are (2, D, H, W). Ties go to channel 0.
    """
    la = probs1[1] > probs1[0]
    scar = np.zeros_like(la) if probs2 is None else probs2[1] > probs2[0]
    return compose_labels(la, scar)


def segment_case(models, case: PreparedCase, eval_crop, postprocess: bool = True,
                 dilation: int = 1, connectivity: int = 26):
    """Crop at the scan center, predict, compose, optionally filter, map to the native grid.

    Returns ``(native LabelVolume, processing-grid labels, placement)``.
    """
    placement: CropPlacement = case.placement(eval_crop)
    x = crop_array(case.image, placement.spec, 0.0)
    p1, p2 = predict(models, x)
    lab = compose_prediction(p1, p2)
    if postprocess:
        la, scar = filter_disconnected(lab == 1, lab == 2, dilation, connectivity)
        lab = compose_labels(la, scar)
    pred = LabelVolume.from_array(lab)
    native = restore_native(pred, case.native_header, placement)
    return native, lab, placement
