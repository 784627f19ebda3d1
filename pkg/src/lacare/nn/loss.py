"""Generalized Dice loss with exact gradient."""
from __future__ import annotations

import numpy as np


class LossError(ValueError):
    """Raised when the loss is undefined for the given target."""


def generalized_dice_loss(probs: np.ndarray, target: np.ndarray):
    """Volume-weighted Dice loss over all classes of a batch.

    ``probs`` and ``target`` are ``(B, L, ...)`` with the class axis second.
    Each class is weighted by the inverse squared ground-truth volume summed
    over the batch; classes absent from the target get weight 0, which drops
    them from both numerator and denominator.

    Returns ``(loss, d loss / d probs)``.
    """
    if probs.shape != target.shape:
        raise LossError(f"probs {probs.shape} and target {target.shape} differ")
    axes = (0,) + tuple(range(2, probs.ndim))
    vol = target.sum(axis=axes, dtype=np.float64)
    if not np.any(vol > 0):
        raise LossError("every class is empty in the target")
    w = np.zeros_like(vol)
    w[vol > 0] = 1.0 / vol[vol > 0] ** 2
    inter = (target * probs).sum(axis=axes, dtype=np.float64)
    total = (target + probs).sum(axis=axes, dtype=np.float64)
    num = float(np.dot(w, inter))
    den = float(np.dot(w, total))
    loss = 1.0 - 2.0 * num / den

    shape = (1, -1) + (1,) * (probs.ndim - 2)
    wb = w.reshape(shape)
    grad = -2.0 * wb * (target * den - num) / den ** 2
    return loss, grad.astype(probs.dtype)
