"""Inter-modality cross-attention between RGB and IR descriptors."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

from c2former import tensor_core
from c2former.modnorm import ModNormParams, modality_normalize
from c2former.tensor_core import ConvParams


@dataclass(frozen=True)
class StreamParams:
    """Per-modality 1x1 projections plus the normalization that feeds the query."""

    wq: ConvParams
    wk: ConvParams
    wv: ConvParams
    modnorm: ModNormParams


@dataclass(frozen=True)
class IcaParams:
    rgb: StreamParams
    ir: StreamParams
    wm: ConvParams  # output projection of the RGB-valued path
    wn: ConvParams  # output projection of the IR-valued path


class Descriptors(NamedTuple):
    q_rgb: object
    q_ir: object
    k_rgb: object
    k_ir: object
    v_rgb: object
    v_ir: object


def make_descriptors(x_rgb, x_ir, p: IcaParams, xp=tensor_core) -> Descriptors:
    """Project both streams to ``(N, H*W, C)`` query/key/value descriptors.

    Keys and values come from the raw features.  Each query comes from its
    stream after modality normalization against the other stream.
    """
    if tuple(x_rgb.shape) != tuple(x_ir.shape):
        raise ValueError(f"shape mismatch: {tuple(x_rgb.shape)} vs {tuple(x_ir.shape)}")
    xt_rgb = modality_normalize(x_rgb, x_ir, p.rgb.modnorm, xp)
    xt_ir = modality_normalize(x_ir, x_rgb, p.ir.modnorm, xp)

    def desc(x, w):
        return xp.to_descriptors(xp.conv2d(x, w))

    return Descriptors(
        q_rgb=desc(xt_rgb, p.rgb.wq),
        q_ir=desc(xt_ir, p.ir.wq),
        k_rgb=desc(x_rgb, p.rgb.wk),
        k_ir=desc(x_ir, p.ir.wk),
        v_rgb=desc(x_rgb, p.rgb.wv),
        v_ir=desc(x_ir, p.ir.wv),
    )


def cross_similarity(q, k, xp=tensor_core):
    """Row-stochastic ``softmax(q k^T / sqrt(C))``; rows are queries, columns keys."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"channel mismatch: {q.shape[-1]} vs {k.shape[-1]}")
    logits = xp.scale(xp.matmul(q, xp.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    return xp.softmax_rows(logits)


def soft_attention(m, v, xp=tensor_core):
    return xp.matmul(m, v)


def similarity_matrices(d: Descriptors, xp=tensor_core):
    """``(m_rgb, m_ir)``: IR queries against RGB keys, and RGB queries against IR keys."""
    return cross_similarity(d.q_ir, d.k_rgb, xp), cross_similarity(d.q_rgb, d.k_ir, xp)


def ica_forward(x_rgb, x_ir, p: IcaParams, stride: int, out_shape, xp=tensor_core):
    """Complementary features ``(y_rgb, y_ir)`` upsampled to ``out_shape``.

    ``y_rgb`` aggregates RGB values at IR query positions (so it is aligned
    with the IR stream); ``y_ir`` is the converse.
    """
    Hs, Ws = x_rgb.shape[2], x_rgb.shape[3]
    H, W = out_shape
    if H // stride != Hs or W // stride != Ws:
        raise ValueError(f"output shape {tuple(out_shape)} does not match {Hs}x{Ws} at stride {stride}")
    d = make_descriptors(x_rgb, x_ir, p, xp)
    m_rgb, m_ir = similarity_matrices(d, xp)
    yt_rgb = xp.from_descriptors(soft_attention(m_rgb, d.v_rgb, xp), Hs, Ws)
    yt_ir = xp.from_descriptors(soft_attention(m_ir, d.v_ir, xp), Hs, Ws)
    y_rgb = xp.deconv1x1_stride(yt_rgb, p.wm, stride, (H, W))
    y_ir = xp.deconv1x1_stride(yt_ir, p.wn, stride, (H, W))
    return y_rgb, y_ir
