"""Dense float64 kernels shared by every part of the fusion block.

All functions are pure and operate on ``numpy`` arrays laid out as
``(batch, channels, height, width)``.  The same names are mirrored by
:class:`c2former.autodiff.Tape`, so block code written against an ``xp``
namespace argument runs either eagerly (this module) or recorded for
reverse-mode differentiation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

EPS = 1e-5
SNAP_TOL = 1e-9


@dataclass(frozen=True)
class ConvParams:
    """Weight ``(out, in, k, k)`` with ``k`` in {1, 3} and optional bias ``(out,)``."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]


def _check_conv(x_shape, w_shape):
    if len(w_shape) != 4 or w_shape[2] != w_shape[3] or w_shape[2] not in (1, 3):
        raise ValueError(f"unsupported kernel shape {tuple(w_shape)}; expected 1x1 or 3x3")
    if len(x_shape) != 4:
        raise ValueError(f"expected a (N, C, H, W) feature map, got shape {tuple(x_shape)}")
    if x_shape[1] != w_shape[1]:
        raise ValueError(f"channel mismatch: input has {x_shape[1]}, kernel expects {w_shape[1]}")


def _pointwise(w2d, x):
    return np.einsum("oi,nihw->nohw", w2d, x)


def conv2d_raw(x, weight, bias=None):
    _check_conv(x.shape, weight.shape)
    if weight.shape[-1] == 1:
        y = _pointwise(weight[:, :, 0, 0], x)
    else:
        H, W = x.shape[2:]
        xpad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        y = np.zeros((x.shape[0], weight.shape[0], H, W), dtype=np.result_type(x, weight))
        for dh in range(3):
            for dw in range(3):
                y += _pointwise(weight[:, :, dh, dw], xpad[:, :, dh:dh + H, dw:dw + W])
    if bias is not None:
        y = y + bias[None, :, None, None]
    return y


def conv2d(x, p: ConvParams):
    """Stride-1 convolution; 3x3 kernels are zero-padded by one pixel."""
    return conv2d_raw(x, p.weight, p.bias)


def conv2d_backward(g, x, weight):
    """Adjoints ``(dx, dweight, dbias)`` of :func:`conv2d_raw` for upstream ``g``."""
    if weight.shape[-1] == 1:
        w2d = weight[:, :, 0, 0]
        dx = np.einsum("oi,nohw->nihw", w2d, g)
        dw = np.einsum("nohw,nihw->oi", g, x)[:, :, None, None]
    else:
        H, W = x.shape[2:]
        xpad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        dxpad = np.zeros_like(xpad)
        dw = np.zeros_like(weight)
        for dh in range(3):
            for dw_ in range(3):
                window = xpad[:, :, dh:dh + H, dw_:dw_ + W]
                dw[:, :, dh, dw_] = np.einsum("nohw,nihw->oi", g, window)
                dxpad[:, :, dh:dh + H, dw_:dw_ + W] += np.einsum(
                    "oi,nohw->nihw", weight[:, :, dh, dw_], g)
        dx = dxpad[:, :, 1:-1, 1:-1]
    db = g.sum(axis=(0, 2, 3))
    return dx, dw, db


def relu(x):
    return np.maximum(x, 0.0)


def scaled_tanh(x):
    """``2 * tanh(x)``, bounding offsets to the open interval (-2, 2)."""
    return 2.0 * np.tanh(x)


def softmax_rows(m):
    """Softmax over the last axis, max-shifted for stability."""
    z = np.exp(m - m.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def transpose(a):
    """Swap the last two axes."""
    return np.swapaxes(a, -1, -2)


def add(a, b):
    return a + b


def mul(a, b):
    return a * b


def scale(a, c: float):
    return a * c


def concat_channels(a, b):
    return np.concatenate([a, b], axis=1)


def gamma_reshape(x):
    """Map one ``(C, H, W)`` feature map to a ``(H*W, C)`` descriptor.

    Row ``p`` holds position ``h * W + w``.
    """
    C = x.shape[0]
    return x.reshape(C, -1).T.copy()


def gamma_inverse(d, H: int, W: int):
    if d.shape[0] != H * W:
        raise ValueError(f"cannot reshape {d.shape[0]} positions to {H}x{W}")
    return d.T.reshape(d.shape[1], H, W).copy()


def to_descriptors(x):
    """Batched :func:`gamma_reshape`: ``(N, C, H, W) -> (N, H*W, C)``."""
    N, C = x.shape[:2]
    return np.ascontiguousarray(x.reshape(N, C, -1).transpose(0, 2, 1))


def from_descriptors(d, H: int, W: int):
    N, P, C = d.shape
    if P != H * W:
        raise ValueError(f"cannot reshape {P} positions to {H}x{W}")
    return np.ascontiguousarray(d.transpose(0, 2, 1).reshape(N, C, H, W))


def instance_stats(x):
    """Per-(n, c) spatial mean and ``sqrt(population variance + EPS)``."""
    mu = x.mean(axis=(2, 3))
    var = ((x - mu[:, :, None, None]) ** 2).mean(axis=(2, 3))
    return mu, np.sqrt(var + EPS)


def channel_mean(x):
    return instance_stats(x)[0][:, :, None, None]


def channel_std(x):
    return instance_stats(x)[1][:, :, None, None]


def instance_norm(x):
    mu, sigma = instance_stats(x)
    return (x - mu[:, :, None, None]) / sigma[:, :, None, None]


def _snap(p):
    r = np.rint(p)
    return np.where(np.abs(p - r) < SNAP_TOL, r, p)


def _bilinear_setup(H, W, coords):
    px = _snap((coords[..., 0] + 1.0) * 0.5 * (W - 1))
    py = _snap((coords[..., 1] + 1.0) * 0.5 * (H - 1))
    x0 = np.floor(px)
    y0 = np.floor(py)
    return x0.astype(np.int64), y0.astype(np.int64), px - x0, py - y0


def _corners(x0, y0, wx, wy):
    # (dy, dx, weight) for the four neighbours
    return (
        (0, 0, (1 - wx) * (1 - wy)),
        (0, 1, wx * (1 - wy)),
        (1, 0, (1 - wx) * wy),
        (1, 1, wx * wy),
    )


def _gather(x, n_idx, yy, xx):
    H, W = x.shape[2:]
    valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
    vals = x[n_idx, :, np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)]  # (N, Hs, Ws, C)
    return vals * valid[..., None], valid


def _batched_coords(x, coords):
    coords = np.asarray(coords)
    if coords.ndim == 3:
        coords = np.broadcast_to(coords, (x.shape[0],) + coords.shape)
    if coords.shape[0] != x.shape[0] or coords.shape[-1] != 2:
        raise ValueError(f"coords of shape {coords.shape} do not match features {x.shape}")
    if not np.all(np.isfinite(coords)):
        raise ValueError("sampling coordinates must be finite")
    return coords


def bilinear_sample(x, coords):
    """Sample ``x`` at normalized ``coords`` with zero padding.

    ``coords[..., 0]`` is the horizontal and ``coords[..., 1]`` the vertical
    coordinate in [-1, 1], corner aligned: -1 is pixel 0 and +1 is pixel
    ``extent - 1``.  ``coords`` is ``(Hs, Ws, 2)`` or ``(N, Hs, Ws, 2)``.
    Positions within ``SNAP_TOL`` pixels of an integer are snapped so that
    grid-point sampling is exact.
    """
    coords = _batched_coords(x, coords)
    H, W = x.shape[2:]
    x0, y0, wx, wy = _bilinear_setup(H, W, coords)
    n_idx = np.arange(x.shape[0])[:, None, None]
    out = np.zeros(coords.shape[:3] + (x.shape[1],), dtype=np.result_type(x, coords))
    for dy, dx, w in _corners(x0, y0, wx, wy):
        vals, _ = _gather(x, n_idx, y0 + dy, x0 + dx)
        out += w[..., None] * vals
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def bilinear_sample_backward(g, x, coords):
    """Adjoints ``(dx, dcoords)`` of :func:`bilinear_sample`.

    ``dcoords`` has the shape ``coords`` was given in (summed over the batch
    when a shared grid was passed).
    """
    given_shape = np.shape(coords)
    coords = _batched_coords(x, coords)
    H, W = x.shape[2:]
    x0, y0, wx, wy = _bilinear_setup(H, W, coords)
    n_idx = np.broadcast_to(np.arange(x.shape[0])[:, None, None], x0.shape)
    g_last = g.transpose(0, 2, 3, 1)  # (N, Hs, Ws, C)
    dx = np.zeros_like(x)
    vals = {}
    for dy, dxo, w in _corners(x0, y0, wx, wy):
        yy, xx = y0 + dy, x0 + dxo
        v, valid = _gather(x, n_idx, yy, xx)
        vals[dy, dxo] = v
        contrib = g_last * (w * valid)[..., None]
        np.add.at(dx, (n_idx, slice(None), np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)), contrib)
    d_px = ((1 - wy)[..., None] * (vals[0, 1] - vals[0, 0])
            + wy[..., None] * (vals[1, 1] - vals[1, 0]))
    d_py = ((1 - wx)[..., None] * (vals[1, 0] - vals[0, 0])
            + wx[..., None] * (vals[1, 1] - vals[0, 1]))
    dcoords = np.stack([
        (g_last * d_px).sum(axis=-1) * 0.5 * (W - 1),
        (g_last * d_py).sum(axis=-1) * 0.5 * (H - 1),
    ], axis=-1)
    if len(given_shape) == 3:
        dcoords = dcoords.sum(axis=0)
    return dx, dcoords


def deconv1x1_stride(y, p: ConvParams, stride: int, out_size=None):
    """Transposed 1x1 convolution with upsampling stride ``stride``.

    Site ``(i*s, j*s)`` of the output receives ``bias + W @ y[:, :, i, j]``;
    every other site carries the bias only.  ``out_size`` defaults to
    ``(Hs*s, Ws*s)`` and may be larger as long as ``floor(size / s)`` still
    equals the input extent.
    """
    if p.kernel_size != 1:
        raise ValueError("deconv1x1_stride needs a 1x1 kernel")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    _check_conv(y.shape, p.weight.shape)
    N, _, Hs, Ws = y.shape
    Ho, Wo = out_size if out_size is not None else (Hs * stride, Ws * stride)
    if Ho // stride != Hs or Wo // stride != Ws:
        raise ValueError(f"output size {(Ho, Wo)} incompatible with input {(Hs, Ws)} at stride {stride}")
    if stride == 1:
        return conv2d(y, p)
    out = np.zeros((N, p.out_channels, Ho, Wo), dtype=np.result_type(y, p.weight))
    if p.bias is not None:
        out += p.bias[None, :, None, None]
    out[:, :, :Hs * stride:stride, :Ws * stride:stride] += _pointwise(p.weight[:, :, 0, 0], y)
    return out


def pick_reference(field, stride: int):
    """Index ``(N, K, H, W)`` at pixels ``(i*s, j*s)``, returning ``(N, Hs, Ws, K)``."""
    H, W = field.shape[2:]
    Hs, Ws = H // stride, W // stride
    picked = field[:, :, :Hs * stride:stride, :Ws * stride:stride]
    return np.ascontiguousarray(picked.transpose(0, 2, 3, 1))


def total(x):
    return np.sum(x)
