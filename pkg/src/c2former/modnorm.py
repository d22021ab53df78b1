"""Modality normalization: remap one stream onto the other's channel statistics."""
from __future__ import annotations

from dataclasses import dataclass

from c2former import tensor_core
from c2former.tensor_core import ConvParams


@dataclass(frozen=True)
class ModNormParams:
    """Three 3x3, C->C convolutions.

    ``wd`` is the shared hidden layer; ``wb`` and ``wg`` predict the shift
    and scale residuals added to the reference mean and std.
    """

    wd: ConvParams
    wb: ConvParams
    wg: ConvParams


def modality_normalize(x_src, x_ref, p: ModNormParams, xp=tensor_core):
    """Instance-normalize ``x_src`` and re-scale it with statistics of ``x_ref``.

    Returns ``IN(x_src) * gamma + beta`` where::

        beta  = wb * relu(wd * x_ref) + mean(x_ref)
        gamma = wg * relu(wd * x_ref) + std(x_ref)

    with the statistics broadcast over height and width per (n, c).
    """
    if tuple(x_src.shape) != tuple(x_ref.shape):
        raise ValueError(f"shape mismatch: {tuple(x_src.shape)} vs {tuple(x_ref.shape)}")
    hidden = xp.relu(xp.conv2d(x_ref, p.wd))
    beta = xp.add(xp.conv2d(hidden, p.wb), xp.channel_mean(x_ref))
    gamma = xp.add(xp.conv2d(hidden, p.wg), xp.channel_std(x_ref))
    return xp.add(xp.mul(xp.instance_norm(x_src), gamma), beta)
