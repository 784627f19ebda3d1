"""Convolution backend selection.

The compiled extension is used when importable; otherwise, or when
``LACARE_BACKEND=python`` is set, the numpy implementation runs instead.
Both produce the same values up to float rounding.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from lacare._ext import _conv3d as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = ("compiled", "python")
_active = "python"


def available() -> tuple[str, ...]:
    return ("compiled", "python") if _compiled is not None else ("python",)


def set_backend(name: str) -> None:
    global _active
    if name == "auto":
        name = "compiled" if _compiled is not None else "python"
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choose from {_BACKENDS + ('auto',)}")
    if name == "compiled" and _compiled is None:
        raise RuntimeError("compiled backend requested but lacare._ext._conv3d is not built")
    _active = name


def get_backend() -> str:
    return _active


set_backend(os.environ.get("LACARE_BACKEND", "auto"))


def _pad1(x: np.ndarray, width: int | None = None) -> np.ndarray:
    """Zero border of one voxel; ``width`` widens the last axis with extra zeros."""
    c, d, h, w = x.shape
    wp = w if width is None else width
    xp = np.zeros((c, d + 2, h + 2, wp + 2), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, 1:w + 1] = x
    return xp


def _vector_width(w: int, dtype) -> int:
    """Round ``w`` up to a whole number of 64-byte vectors (the compiled block size)."""
    lanes = 64 // np.dtype(dtype).itemsize
    return -(-w // lanes) * lanes


def _pad_out_channels(w: np.ndarray, b: np.ndarray):
    """Zero output channels up to a multiple of the compiled channel block (8)."""
    co = w.shape[0]
    cp = -(-co // 8) * 8
    if cp == co:
        return np.ascontiguousarray(w), np.ascontiguousarray(b)
    wp = np.zeros((cp,) + w.shape[1:], dtype=w.dtype)
    wp[:co] = w
    bp = np.zeros(cp, dtype=b.dtype)
    bp[:co] = b
    return wp, bp


def _compiled_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # padded lanes and channels only produce outputs that are sliced away
    d, h, wd = x.shape[1:]
    wv = _vector_width(wd, x.dtype)
    wp, bp = _pad_out_channels(w, b)
    out = np.empty((wp.shape[0], d, h, wv), dtype=x.dtype)
    _compiled.forward(_pad1(x, wv), wp, bp, out)
    if wv == wd and wp.shape[0] == w.shape[0]:
        return out
    return np.ascontiguousarray(out[:w.shape[0], :, :, :wd])


def _im2col(xp: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    d, h, w = shape
    cols = np.empty((xp.shape[0], 27, d, h, w), dtype=xp.dtype)
    k = 0
    for a in range(3):
        for b in range(3):
            for c in range(3):
                cols[:, k] = xp[:, a:a + d, b:b + h, c:c + w]
                k += 1
    return cols.reshape(xp.shape[0] * 27, d * h * w)


def conv3x3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded 3x3x3 convolution of a ``(C, D, H, W)`` sample."""
    if _active == "compiled":
        return _compiled_forward(x, w, b)
    xp = _pad1(x)
    out = np.empty((w.shape[0],) + x.shape[1:], dtype=x.dtype)
    cols = _im2col(xp, x.shape[1:])
    out[...] = (w.reshape(w.shape[0], -1) @ cols).reshape(out.shape)
    out += b[:, None, None, None]
    return out


def conv3x3x3_backward(x: np.ndarray, w: np.ndarray, gy: np.ndarray,
                       gw: np.ndarray, need_input_grad: bool = True) -> np.ndarray | None:
    """Return the input gradient and accumulate the kernel gradient into ``gw``.

    With ``need_input_grad`` unset only ``gw`` is updated and None is returned.
    """
    w_adj = w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    zero = np.zeros(w.shape[1], dtype=w.dtype)
    if _active == "compiled":
        wd = x.shape[-1]
        wv = _vector_width(wd, x.dtype)
        if wv == wd:
            g = np.ascontiguousarray(gy)
        else:
            g = np.zeros(gy.shape[:-1] + (wv,), dtype=gy.dtype)
            g[..., :wd] = gy
        _compiled.grad_weight(_pad1(x, wv), g, gw)
        if not need_input_grad:
            return None
        return _compiled_forward(gy, w_adj, zero)
    xp = _pad1(x)
    cols = _im2col(xp, x.shape[1:])
    g2 = gy.reshape(gy.shape[0], -1)
    gw += (g2 @ cols.T).reshape(gw.shape)
    if not need_input_grad:
        return None
    w_adj = np.ascontiguousarray(w_adj)
    gcols = _im2col(_pad1(gy), gy.shape[1:])
    return (w_adj.reshape(w_adj.shape[0], -1) @ gcols).reshape(x.shape)
