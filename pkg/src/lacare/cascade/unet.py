"""U-Net stage: parameter layout, forward pass with cache, exact backward pass.

Layout for ``levels = L`` and ``F`` filters (all 3x3x3 convs followed by
leaky ReLU, channel width constant at ``F``)::

    pre0, pre1                         full resolution
    down{l}_0, dropout, down{l}_1      l = 0 .. L-1, max pool between levels
    upsample, concat(skip{l}, up),
    up{l}_0, dropout, up{l}_1          l = L-2 .. 0
    post0, post1, post2
    head                               1x1x1, out_channels, no activation

The deepest ``down{L-1}`` pair is the bottleneck.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from lacare.nn import ops
from lacare.nn.ops import ConvParams


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 5
    base_filters: int = 64
    convs_per_level: int = 2
    pre_convs: int = 2
    post_convs: int = 3
    out_channels: int = 2
    dropout: float = 0.1
    leaky_slope: float = 0.1

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("a U-Net needs at least 2 levels")
        if self.convs_per_level < 1 or self.pre_convs < 0 or self.post_convs < 0:
            raise ValueError("invalid convolution counts")

    def check_input(self, spatial) -> None:
        f = 2 ** (self.levels - 1)
        if any(int(s) % f for s in spatial):
            raise ops.ShapeError(f"spatial shape {tuple(spatial)} not divisible by {f}")

    def to_dict(self) -> dict:
        return asdict(self)


def layer_specs(config: UNetConfig, in_channels: int) -> list[tuple[str, int, int, int]]:
    """(name, in_ch, out_ch, kernel) for every convolution, in forward order."""
    f = config.base_filters
    specs = []
    c = in_channels
    for i in range(config.pre_convs):
        specs.append((f"pre{i}", c, f, 3))
        c = f
    for lvl in range(config.levels):
        for i in range(config.convs_per_level):
            specs.append((f"down{lvl}_{i}", c, f, 3))
            c = f
    for lvl in range(config.levels - 2, -1, -1):
        for i in range(config.convs_per_level):
            specs.append((f"up{lvl}_{i}", 2 * f if i == 0 else f, f, 3))
    for i in range(config.post_convs):
        specs.append((f"post{i}", f, f, 3))
    specs.append(("head", f, config.out_channels, 1))
    return specs


def build_unet(config: UNetConfig, in_channels: int, rng: np.random.Generator,
               dtype=np.float32) -> dict[str, np.ndarray]:
    """He-initialized parameters keyed ``<layer>.w`` / ``<layer>.b``."""
    params = {}
    for name, cin, cout, k in layer_specs(config, in_channels):
        p = ops.he_init(rng, cout, cin, k, dtype)
        params[f"{name}.w"] = p.weight
        params[f"{name}.b"] = p.bias
    return params


def parameter_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


def _conv(params, name) -> ConvParams:
    return ConvParams(params[f"{name}.w"], params[f"{name}.b"])


class _Recorder:
    """Forward-pass cache consumed in reverse by :func:`unet_backward`."""

    def __init__(self):
        self.steps = []


def unet_forward(params, x, config: UNetConfig, training: bool = False,
                 rng: np.random.Generator | None = None, record: bool = False):
    """Return logits, or ``(logits, cache)`` when ``record`` is set."""
    config.check_input(x.shape[2:])
    slope = config.leaky_slope
    tape = _Recorder() if record else None

    def conv_act(h, name):
        p = _conv(params, name)
        z = ops.conv3d(h, p)
        if tape is not None:
            tape.steps.append(("conv_act", name, h, z))
        return ops.leaky_relu(z, slope)

    def drop(h):
        y, mask = ops.dropout(h, config.dropout, rng, training)
        if tape is not None:
            tape.steps.append(("dropout", mask))
        return y

    h = x
    for i in range(config.pre_convs):
        h = conv_act(h, f"pre{i}")
    skips = []
    for lvl in range(config.levels):
        for i in range(config.convs_per_level):
            if i == 1:
                h = drop(h)
            h = conv_act(h, f"down{lvl}_{i}")
        if lvl < config.levels - 1:
            skips.append(h)
            h, arg = ops.maxpool3d(h)
            if tape is not None:
                tape.steps.append(("pool", arg, lvl))
    for lvl in range(config.levels - 2, -1, -1):
        h = ops.upsample_trilinear(h, 2)
        skip = skips[lvl]
        h = ops.concat_channels(skip, h)
        if tape is not None:
            tape.steps.append(("up_concat", lvl, skip.shape[1]))
        for i in range(config.convs_per_level):
            if i == 1:
                h = drop(h)
            h = conv_act(h, f"up{lvl}_{i}")
    for i in range(config.post_convs):
        h = conv_act(h, f"post{i}")
    head = _conv(params, "head")
    logits = ops.conv3d(h, head)
    if tape is None:
        return logits
    tape.steps.append(("head", h))
    return logits, tape


def unet_backward(params, cache: _Recorder, g_logits, config: UNetConfig,
                  need_input_grad: bool = True):
    """Return ``(grad_input, grads)`` with ``grads`` keyed like ``params``.

    ``grad_input`` is None when ``need_input_grad`` is unset, which skips
    the most expensive part of the first convolution's backward pass.
    """
    slope = config.leaky_slope
    grads = {}
    skip_grads = {}
    g = g_logits
    first = next(i for i, s in enumerate(cache.steps) if s[0] == "conv_act")
    for idx in range(len(cache.steps) - 1, -1, -1):
        step = cache.steps[idx]
        kind = step[0]
        if kind == "head":
            g, gp = ops.conv3d_backward(step[1], _conv(params, "head"), g)
            grads["head.w"], grads["head.b"] = gp.weight, gp.bias
        elif kind == "conv_act":
            _, name, h_in, z = step
            g = ops.leaky_relu_backward(z, g, slope)
            g, gp = ops.conv3d_backward(h_in, _conv(params, name), g,
                                        need_input_grad or idx != first)
            grads[f"{name}.w"], grads[f"{name}.b"] = gp.weight, gp.bias
        elif kind == "dropout":
            g = ops.dropout_backward(step[1], g)
        elif kind == "up_concat":
            _, lvl, n_skip = step
            g_skip, g_up = ops.concat_channels_backward(g, n_skip)
            skip_grads[lvl] = g_skip
            g = ops.upsample_trilinear_backward(g_up, 2)
        elif kind == "pool":
            _, arg, lvl = step
            g = ops.maxpool3d_backward(arg, g) + skip_grads.pop(lvl)
    return g, grads
