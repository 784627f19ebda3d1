"""Forward and backward passes for the fixed layer set of the cascade.

All tensors are dense ``(batch, channel, depth, height, width)`` numpy
arrays. Each forward function has a matching ``*_backward`` that returns
exact gradients; nothing here keeps hidden state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lacare.nn import backend


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with a layer."""


@dataclass
class ConvParams:
    weight: np.ndarray  # (out_ch, in_ch, k, k, k), k in {1, 3}
    bias: np.ndarray  # (out_ch,)

    def __post_init__(self):
        k = self.weight.shape[2:]
        if self.weight.ndim != 5 or k not in ((1, 1, 1), (3, 3, 3)):
            raise ShapeError(f"kernel must be 1x1x1 or 3x3x3, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("bias length must equal output channels")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


def _check5(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 5:
        raise ShapeError(f"{name} must be rank 5 (B, C, D, H, W), got shape {x.shape}")


# -- convolution -------------------------------------------------------------

def conv3d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Stride-1 convolution with zero "same" padding."""
    _check5(x)
    w, b = params.weight, params.bias
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    if params.kernel_size == 1:
        y = np.einsum("oi,bi...->bo...", w[:, :, 0, 0, 0], x, optimize=True)
        return y + b[None, :, None, None, None]
    return np.stack([backend.conv3x3x3_forward(xi, w, b) for xi in x])


def conv3d_backward(x: np.ndarray, params: ConvParams, gy: np.ndarray,
                    need_input_grad: bool = True):
    """Return ``(grad_input, ConvParams-shaped gradient)``; grad_input is None if not needed."""
    w = params.weight
    gw = np.zeros_like(w)
    gb = gy.sum(axis=(0, 2, 3, 4))
    if params.kernel_size == 1:
        w2 = w[:, :, 0, 0, 0]
        gw[:, :, 0, 0, 0] = np.einsum("bo...,bi...->oi", gy, x, optimize=True)
        gx = np.einsum("oi,bo...->bi...", w2, gy, optimize=True) if need_input_grad else None
        return gx, ConvParams(gw, gb)
    gx = [backend.conv3x3x3_backward(xi, w, gi, gw, need_input_grad) for xi, gi in zip(x, gy)]
    return (np.stack(gx) if need_input_grad else None), ConvParams(gw, gb)


def he_init(rng: np.random.Generator, out_ch: int, in_ch: int, k: int = 3,
            dtype=np.float32) -> ConvParams:
    """He-normal kernels, std = sqrt(2 / (in_ch * k**3)); zero bias."""
    fan_in = in_ch * k ** 3
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k, k))
    return ConvParams(w.astype(dtype), np.zeros(out_ch, dtype=dtype))


# -- pooling / upsampling ----------------------------------------------------

def maxpool3d(x: np.ndarray):
    """2x2x2 max pooling, stride 2. Returns ``(output, argmax)``.

    ``argmax`` holds the window position 0..7 in (z, y, x) raster order,
    which is also increasing linear index, so ties go to the first voxel.
    """
    _check5(x)
    b, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even spatial dims, got {(d, h, w)}")
    win = (x.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 6, 3, 5, 7)
            .reshape(b, c, d // 2, h // 2, w // 2, 8))
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int8)


def maxpool3d_backward(argmax: np.ndarray, gy: np.ndarray) -> np.ndarray:
    b, c, d, h, w = gy.shape
    onehot = argmax[..., None] == np.arange(8, dtype=np.int8)
    win = np.where(onehot, gy[..., None], 0).astype(gy.dtype, copy=False)
    return (win.reshape(b, c, d, h, w, 2, 2, 2)
               .transpose(0, 1, 2, 5, 3, 6, 4, 7)
               .reshape(b, c, 2 * d, 2 * h, 2 * w))


def _interp_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """Row i samples the input at (i + 0.5) / factor - 0.5, clamped to the edges."""
    n_out = n_in * factor
    src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    np.add.at(m, (np.arange(n_out), i0), 1 - t)
    np.add.at(m, (np.arange(n_out), i1), t)
    return m.astype(dtype)


def _apply_axes(x: np.ndarray, mats) -> np.ndarray:
    for axis, m in zip((2, 3, 4), mats):
        x = np.moveaxis(np.moveaxis(x, axis, -1) @ m.T, -1, axis)
    return np.ascontiguousarray(x)


def upsample_trilinear(x: np.ndarray, factor: int = 2) -> np.ndarray:
    _check5(x)
    mats = [_interp_matrix(n, factor, x.dtype) for n in x.shape[2:]]
    return _apply_axes(x, mats)


def upsample_trilinear_backward(gy: np.ndarray, factor: int = 2) -> np.ndarray:
    """Adjoint of :func:`upsample_trilinear`."""
    mats = [_interp_matrix(n // factor, factor, gy.dtype).T for n in gy.shape[2:]]
    return _apply_axes(gy, mats)


# -- pointwise ---------------------------------------------------------------

def leaky_relu(x: np.ndarray, slope: float = 0.1) -> np.ndarray:
    if 0.0 <= slope <= 1.0:
        return np.maximum(x, x * x.dtype.type(slope))
    return np.where(x > 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(x: np.ndarray, gy: np.ndarray, slope: float = 0.1) -> np.ndarray:
    s = gy.dtype.type(slope)
    if (gy.dtype.type(1) - s) + s != 1:
        return np.where(x > 0, gy, gy * s)
    # factor is exactly 1 or slope, without np.where's slow masked select
    f = (x > 0).astype(gy.dtype)
    f *= gy.dtype.type(1) - s
    f += s
    f *= gy
    return f


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout. Returns ``(output, scale_mask)``; mask is None in eval mode."""
    if not training or rate == 0.0:
        return x, None
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


def dropout_backward(mask: np.ndarray | None, gy: np.ndarray) -> np.ndarray:
    return gy if mask is None else gy * mask


def softmax_channels(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(p: np.ndarray, gp: np.ndarray) -> np.ndarray:
    return p * (gp - (p * gp).sum(axis=1, keepdims=True))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != b.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(g: np.ndarray, a_channels: int):
    return g[:, :a_channels], g[:, a_channels:]
