"""Adaptive feature sampling: offset prediction and strided bilinear sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from c2former import tensor_core
from c2former.tensor_core import ConvParams


@dataclass(frozen=True)
class AfsParams:
    wc: ConvParams   # 1x1, 2C -> C
    fd1: ConvParams  # 3x3, C -> C
    fd2: ConvParams  # 3x3, C -> 2 (x-, y-offset)


def reduced_size(H: int, W: int, stride: int):
    """Grid extents ``(H // s, W // s)``."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    Hs, Ws = H // stride, W // stride
    if Hs < 1 or Ws < 1:
        raise ValueError(f"stride {stride} leaves an empty grid for a {H}x{W} map")
    return Hs, Ws


def _normalize_axis(pixels, extent):
    if extent == 1:
        return np.full(len(pixels), -1.0)
    return 2.0 * pixels / (extent - 1) - 1.0


def make_reference_grid(H: int, W: int, stride: int):
    """Normalized coordinates of pixels ``(i*s, j*s)`` as an ``(Hs, Ws, 2)`` array.

    Channel 0 is the horizontal coordinate ``u``, channel 1 the vertical ``v``.
    """
    Hs, Ws = reduced_size(H, W, stride)
    if stride > 1 and (H == 1 or W == 1):
        raise ValueError("a unit extent cannot be normalized at stride > 1")
    u = _normalize_axis(np.arange(Ws) * stride, W)
    v = _normalize_axis(np.arange(Hs) * stride, H)
    grid = np.empty((Hs, Ws, 2))
    grid[..., 0] = u[None, :]
    grid[..., 1] = v[:, None]
    return grid


def predict_offsets(x_rgb, x_ir, p: AfsParams, stride: int, xp=tensor_core):
    """Offsets ``2 tanh(fd(wc * [x_rgb, x_ir]))`` read at the reference pixels.

    The deviation network runs at full resolution; the field is indexed
    (no interpolation) at ``(i*s, j*s)``, giving ``(N, Hs, Ws, 2)``.
    """
    if tuple(x_rgb.shape) != tuple(x_ir.shape):
        raise ValueError(f"shape mismatch: {tuple(x_rgb.shape)} vs {tuple(x_ir.shape)}")
    reduced_size(x_rgb.shape[2], x_rgb.shape[3], stride)
    xd = xp.conv2d(xp.concat_channels(x_rgb, x_ir), p.wc)
    field = xp.scaled_tanh(xp.conv2d(xp.relu(xp.conv2d(xd, p.fd1)), p.fd2))
    return xp.pick_reference(field, stride)


def afs_sample(x_rgb, x_ir, grid, dp, xp=tensor_core):
    """Sample RGB at ``grid + dp`` and IR at ``grid``; both become ``(N, C, Hs, Ws)``."""
    if tuple(x_rgb.shape) != tuple(x_ir.shape):
        raise ValueError(f"shape mismatch: {tuple(x_rgb.shape)} vs {tuple(x_ir.shape)}")
    if tuple(dp.shape[-3:]) != tuple(grid.shape):
        raise ValueError(f"offsets {tuple(dp.shape)} do not match grid {grid.shape}")
    sampled_rgb = xp.bilinear_sample(x_rgb, xp.add(grid, dp))
    sampled_ir = xp.bilinear_sample(x_ir, grid)
    return sampled_rgb, sampled_ir
