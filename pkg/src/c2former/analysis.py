"""FLOPs accounting and the synthetic miscalibration experiment."""
from __future__ import annotations

import io
import csv
from dataclasses import dataclass, fields

import numpy as np

from c2former import tensor_core as tc
from c2former.block import BlockConfig, parameter_count
from c2former.ica import IcaParams, StreamParams, cross_similarity, make_descriptors
from c2former.modnorm import ModNormParams
from c2former.tensor_core import ConvParams

SOFTMAX_FLOPS_PER_LOGIT = 5  # scale, max-shift, exp, accumulate, divide


@dataclass(frozen=True)
class FlopsReport:
    """Per-component FLOPs (one multiply-add = 2 FLOPs) and the parameter count."""

    descriptors: int
    modnorm: int
    attention_matmuls: int
    softmax: int
    value_matmuls: int
    output_projection: int
    afs: int
    parameter_count: int

    def components(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "parameter_count"}

    @property
    def total(self) -> int:
        return sum(self.components().values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "flops"])
        for name, value in self.components().items():
            w.writerow([name, value])
        w.writerow(["total", self.total])
        w.writerow(["parameter_count", self.parameter_count])
        return buf.getvalue()


def conv_flops(c_in, c_out, k, positions):
    return 2 * c_in * c_out * k * k * positions


def attention_matmul_flops(positions, channels):
    """One ``(P x C) @ (C x P)`` product."""
    return 2 * positions * positions * channels


def count_flops(cfg: BlockConfig, use_afs: bool = True) -> FlopsReport:
    """Closed-form FLOPs of one block.

    With ``use_afs=False`` the attention runs on the full ``H x W`` map with
    plain 1x1 output projections and no sampling network, which is the
    cross-attention-only ablation.  Normalization and residual additions are
    elementwise and not counted.
    """
    C, H, W = cfg.channels, cfg.height, cfg.width
    full = H * W
    if use_afs:
        Hs, Ws = cfg.reduced_shape
        P = Hs * Ws
        afs = (conv_flops(2 * C, C, 1, full) + conv_flops(C, C, 3, full) + conv_flops(C, 2, 3, full)
               + 2 * 2 * 4 * C * P)  # bilinear: 4 taps per sample per stream
    else:
        P = full
        afs = 0
    params = parameter_count(cfg)
    if not use_afs:
        b = 1 if cfg.bias_enabled else 0
        params -= (2 * C * C + b * C) + (9 * C * C + b * C) + (18 * C + b * 2)
    return FlopsReport(
        descriptors=6 * conv_flops(C, C, 1, P),
        modnorm=2 * 3 * conv_flops(C, C, 3, P),
        attention_matmuls=2 * attention_matmul_flops(P, C),
        softmax=2 * SOFTMAX_FLOPS_PER_LOGIT * P * P,
        value_matmuls=2 * attention_matmul_flops(P, C),
        output_projection=2 * conv_flops(C, C, 1, P),
        afs=afs,
        parameter_count=params,
    )


@dataclass(frozen=True)
class CalibScenario:
    channels: int = 16
    height: int = 24
    width: int = 24
    shift: tuple = (3, 2)
    noise_std: float = 0.0
    seed: int = 0
    smoothing: int = 2
    batch: int = 1

    def __post_init__(self):
        dy, dx = self.shift
        if abs(dy) >= self.height or abs(dx) >= self.width:
            raise ValueError(f"shift {self.shift} exceeds the {self.height}x{self.width} map")
        if self.noise_std < 0 or self.smoothing < 0:
            raise ValueError("noise_std and smoothing must be non-negative")


def box_smooth(x, passes: int):
    """Repeated circular 3x3 box filter over the last two axes."""
    for _ in range(passes):
        x = sum(np.roll(x, (dy, dx), axis=(-2, -1)) for dy in (-1, 0, 1) for dx in (-1, 0, 1)) / 9.0
    return x


def gen_scenario(scn: CalibScenario):
    """Build a miscalibrated RGB/IR pair.

    The base map is U(-1, 1) noise, box-smoothed, with every position's
    channel vector scaled to unit length so that no key can out-score a
    query's own position by norm alone.  IR is the base circularly shifted by
    ``scn.shift`` plus Gaussian noise; ``x_ir[..., y, x] == x_rgb[..., y - dy, x - dx]``.
    Returns ``(x_rgb, x_ir, shift)``.
    """
    rng = np.random.default_rng(scn.seed)
    base = rng.uniform(-1.0, 1.0, size=(scn.batch, scn.channels, scn.height, scn.width))
    base = box_smooth(base, scn.smoothing)
    norms = np.linalg.norm(base, axis=1, keepdims=True)
    base = base / np.where(norms > 0, norms, 1.0)
    x_ir = np.roll(base, scn.shift, axis=(2, 3))
    if scn.noise_std > 0:
        x_ir = x_ir + scn.noise_std * rng.standard_normal(base.shape)
    return base, x_ir, tuple(scn.shift)


def probe_params(channels: int) -> IcaParams:
    """Identity projections and all-zero normalization networks."""
    eye = ConvParams(np.eye(channels)[:, :, None, None], np.zeros(channels))
    zero3 = ConvParams(np.zeros((channels, channels, 3, 3)), np.zeros(channels))
    stream = StreamParams(eye, eye, eye, ModNormParams(zero3, zero3, zero3))
    return IcaParams(stream, stream, eye, eye)


@dataclass
class RecoveryReport:
    queries: np.ndarray      # (Q, 3): batch, y, x of scored IR queries
    argmax: np.ndarray       # (Q, 2): best RGB key position
    expected: np.ndarray     # (Q, 2): ground-truth RGB position
    radius: int = 1

    @property
    def errors(self) -> np.ndarray:
        return np.linalg.norm(self.argmax - self.expected, axis=1)

    @property
    def hits(self) -> np.ndarray:
        return np.abs(self.argmax - self.expected).max(axis=1) <= self.radius

    @property
    def hit_rate(self) -> float:
        return float(self.hits.mean()) if len(self.hits) else 0.0

    @property
    def mean_error(self) -> float:
        return float(self.errors.mean()) if len(self.errors) else 0.0

    @property
    def low_confidence(self) -> bool:
        return self.hit_rate < 0.5

    def summary(self) -> str:
        flag = " (low confidence)" if self.low_confidence else ""
        return (f"queries={len(self.hits)} radius={self.radius} hit_rate={self.hit_rate:.4f} "
                f"mean_error_px={self.mean_error:.4f}{flag}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["batch", "query_y", "query_x", "argmax_y", "argmax_x", "true_y", "true_x",
                    "error_px", "hit"])
        for q, a, e, err, hit in zip(self.queries, self.argmax, self.expected, self.errors, self.hits):
            w.writerow([*q, *a, *e, f"{err:.6f}", int(hit)])
        return buf.getvalue()


def eval_alignment_recovery(x_rgb, x_ir, shift, probe_mode="identity", radius=1) -> RecoveryReport:
    """Score whether each IR query's attention peak lands on its RGB counterpart.

    Attention is IR queries against RGB keys at full resolution.  In
    ``"identity"`` mode the query passes through modality normalization with
    zero networks and identity projections; ``"raw"`` skips normalization.
    Only queries whose counterpart ``(y - dy, x - dx)`` does not wrap are
    scored; a hit means Chebyshev distance <= ``radius`` pixels.
    """
    N, C, H, W = x_rgb.shape
    if probe_mode == "identity":
        d = make_descriptors(x_rgb, x_ir, probe_params(C))
        q, k = d.q_ir, d.k_rgb
    elif probe_mode == "raw":
        q, k = tc.to_descriptors(x_ir), tc.to_descriptors(x_rgb)
    else:
        raise ValueError(f"unknown probe mode {probe_mode!r}")
    m = cross_similarity(q, k)
    best = m.argmax(axis=-1)  # (N, H*W)
    dy, dx = shift
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    ty, tx = ys - dy, xs - dx
    keep = (ty >= 0) & (ty < H) & (tx >= 0) & (tx < W)
    queries, argmax, expected = [], [], []
    for n in range(N):
        for y, x in zip(ys[keep], xs[keep]):
            b = best[n, y * W + x]
            queries.append((n, y, x))
            argmax.append(divmod(int(b), W))
            expected.append((y - dy, x - dx))
    return RecoveryReport(np.array(queries).reshape(-1, 3), np.array(argmax).reshape(-1, 2),
                          np.array(expected).reshape(-1, 2), radius)
