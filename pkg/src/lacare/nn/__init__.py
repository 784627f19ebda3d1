"""Minimal dense 3D CNN engine: layers with exact gradients, He init, Adam, EMA."""
from lacare.nn.backend import available as available_backends
from lacare.nn.backend import get_backend, set_backend
from lacare.nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from lacare.nn.loss import LossError, generalized_dice_loss
from lacare.nn.ops import (
    ConvParams,
    ShapeError,
    concat_channels,
    concat_channels_backward,
    conv3d,
    conv3d_backward,
    dropout,
    dropout_backward,
    he_init,
    leaky_relu,
    leaky_relu_backward,
    maxpool3d,
    maxpool3d_backward,
    softmax_channels,
    softmax_channels_backward,
    upsample_trilinear,
    upsample_trilinear_backward,
)
from lacare.nn.optim import AdamState, EmaState, TrainingError, adam_step, ema_update

__all__ = [
    "AdamState", "CheckpointError", "ConvParams", "EmaState", "LossError", "ShapeError",
    "TrainingError", "adam_step", "available_backends", "concat_channels",
    "concat_channels_backward", "conv3d", "conv3d_backward", "dropout", "dropout_backward",
    "ema_update", "generalized_dice_loss", "get_backend", "he_init", "leaky_relu",
    "leaky_relu_backward", "load_checkpoint", "maxpool3d", "maxpool3d_backward",
    "save_checkpoint", "set_backend", "softmax_channels", "softmax_channels_backward",
    "upsample_trilinear", "upsample_trilinear_backward",
]
