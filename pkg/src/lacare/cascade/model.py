"""Two-stage cascade: Stage 1 segments the atrium, Stage 2 refines to scar.

Stage 2 sees the RAW Stage-1 logits concatenated with the image, not the
softmax probabilities; softmax is applied only inside the loss. Gradients
of the Stage-2 loss term therefore reach the Stage-1 weights through that
concatenation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lacare.cascade.unet import UNetConfig, build_unet, unet_backward, unet_forward
from lacare.nn import ops
from lacare.nn.loss import generalized_dice_loss
from lacare.nn.optim import AdamState, EmaState, TrainingError

TWO_STAGE = "two_stage"
STAGE1_ONLY = "stage1_only"
TASK_MODES = (TWO_STAGE, STAGE1_ONLY)


class ConfigurationError(ValueError):
    pass


@dataclass
class ParameterSet:
    """Trainable weights of one stage with their optimizer and EMA state."""
    params: dict[str, np.ndarray]
    adam: AdamState = field(default_factory=AdamState)
    ema: EmaState | None = None

    def weights(self, which: str = "live") -> dict[str, np.ndarray]:
        if which == "ema":
            return self.ema.shadow if self.ema is not None else self.params
        return self.params


@dataclass
class CascadeModel:
    unet: UNetConfig
    stage1: ParameterSet
    stage2: ParameterSet | None = None
    loss_weights: tuple[float, float] = (1.0, 1.0)
    task_mode: str = TWO_STAGE

    def __post_init__(self):
        if self.task_mode not in TASK_MODES:
            raise ConfigurationError(f"task_mode must be one of {TASK_MODES}")
        if (self.stage2 is not None) != (self.task_mode == TWO_STAGE):
            raise ConfigurationError("stage2 must be present exactly in two_stage mode")
        if any(w < 0 for w in self.loss_weights):
            raise ConfigurationError("loss weights must be non-negative")

    @property
    def stages(self) -> list[ParameterSet]:
        return [self.stage1] if self.stage2 is None else [self.stage1, self.stage2]


def build_cascade(unet: UNetConfig, rng: np.random.Generator, task_mode: str = TWO_STAGE,
                  loss_weights=(1.0, 1.0), learning_rate: float = 5e-4,
                  ema_decay: float = 0.999, dtype=np.float32) -> CascadeModel:
    p1 = build_unet(unet, 1, rng, dtype)
    s1 = ParameterSet(p1, AdamState(learning_rate), EmaState.like(p1, ema_decay))
    s2 = None
    if task_mode == TWO_STAGE:
        p2 = build_unet(unet, unet.out_channels + 1, rng, dtype)
        s2 = ParameterSet(p2, AdamState(learning_rate), EmaState.like(p2, ema_decay))
    return CascadeModel(unet, s1, s2, tuple(float(w) for w in loss_weights), task_mode)


def forward_cascade(model: CascadeModel, image: np.ndarray, training: bool = False,
                    rng: np.random.Generator | None = None, weights: str = "live"):
    """Return ``(logits1, logits2)``; ``logits2`` is None in stage1_only mode."""
    if image.ndim != 5 or image.shape[1] != 1:
        raise ops.ShapeError(f"image must be (B, 1, D, H, W), got {image.shape}")
    logits1 = unet_forward(model.stage1.weights(weights), image, model.unet, training, rng)
    if model.stage2 is None:
        return logits1, None
    x2 = ops.concat_channels(logits1, image)
    logits2 = unet_forward(model.stage2.weights(weights), x2, model.unet, training, rng)
    return logits1, logits2


def targets_from_labels(labels: np.ndarray, dtype=np.float32):
    """One-hot targets (B, 2, ...) for atrium-with-scar and for scar alone."""
    fg1 = (labels == 1) | (labels == 2)
    fg2 = labels == 2
    y1 = np.stack([~fg1, fg1], axis=1).astype(dtype)
    y2 = np.stack([~fg2, fg2], axis=1).astype(dtype)
    return y1, y2


def cascade_loss(logits1, logits2, labels, lambda1: float = 1.0, lambda2: float = 1.0,
                 with_grads: bool = False):
    """lambda1 * GD(softmax(logits1), y1) + lambda2 * GD(softmax(logits2), y2).

    ``labels`` is an integer array (B, D, H, W) with values in {0, 1, 2}.
    With ``with_grads`` also returns the gradients w.r.t. both logit tensors
    and the two unweighted terms.
    """
    y1, y2 = targets_from_labels(labels, logits1.dtype)
    p1 = ops.softmax_channels(logits1)
    l1, gp1 = generalized_dice_loss(p1, y1)
    loss = lambda1 * l1
    l2 = gl2 = None
    if logits2 is not None:
        p2 = ops.softmax_channels(logits2)
        l2, gp2 = generalized_dice_loss(p2, y2)
        loss += lambda2 * l2
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss (stage terms {l1}, {l2})")
    if not with_grads:
        return loss
    gl1 = ops.softmax_channels_backward(p1, gp1 * p1.dtype.type(lambda1))
    if logits2 is not None:
        gl2 = ops.softmax_channels_backward(p2, gp2 * p2.dtype.type(lambda2))
    return loss, (l1, l2), gl1, gl2


def loss_and_grads(model: CascadeModel, image: np.ndarray, labels: np.ndarray,
                   rng: np.random.Generator | None = None, training: bool = True):
    """End-to-end loss and gradients for every stage (dicts keyed like params)."""
    cfg = model.unet
    logits1, cache1 = unet_forward(model.stage1.params, image, cfg, training, rng, record=True)
    logits2 = cache2 = None
    if model.stage2 is not None:
        x2 = ops.concat_channels(logits1, image)
        logits2, cache2 = unet_forward(model.stage2.params, x2, cfg, training, rng, record=True)
    lam1, lam2 = model.loss_weights
    loss, terms, g1, g2 = cascade_loss(logits1, logits2, labels, lam1, lam2, with_grads=True)
    grads2 = None
    if model.stage2 is not None:
        gx2, grads2 = unet_backward(model.stage2.params, cache2, g2, cfg)
        g_from2, _ = ops.concat_channels_backward(gx2, logits1.shape[1])
        g1 = g1 + g_from2
    _, grads1 = unet_backward(model.stage1.params, cache1, g1, cfg, need_input_grad=False)
    return loss, terms, grads1, grads2
