"""The fusion block: sampling, cross-attention and opposite-stream residuals."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from c2former import tensor_core
from c2former.afs import AfsParams, afs_sample, make_reference_grid, predict_offsets, reduced_size
from c2former.ica import IcaParams, StreamParams, ica_forward
from c2former.modnorm import ModNormParams
from c2former.tensor_core import ConvParams

DEFAULT_STRIDE = 3
DEFAULT_STAGES = (2, 3, 4)


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    height: int
    width: int
    stride: int = DEFAULT_STRIDE
    seed: int = 0
    bias_enabled: bool = True

    def __post_init__(self):
        if self.channels < 1 or self.height < 1 or self.width < 1:
            raise ValueError("channels, height and width must be >= 1")
        reduced_size(self.height, self.width, self.stride)

    @property
    def reduced_shape(self):
        return reduced_size(self.height, self.width, self.stride)


@dataclass(frozen=True)
class BlockParams:
    afs: AfsParams
    ica: IcaParams


def _conv_shapes(cfg: BlockConfig):
    C = cfg.channels
    pw, k3 = (1, 1), (3, 3)
    mod = {"wd": (C, C) + k3, "wb": (C, C) + k3, "wg": (C, C) + k3}
    stream = {"wq": (C, C) + pw, "wk": (C, C) + pw, "wv": (C, C) + pw, "modnorm": mod}
    return {
        "afs": {"wc": (C, 2 * C) + pw, "fd1": (C, C) + k3, "fd2": (2, C) + k3},
        "ica": {"rgb": stream, "ir": stream, "wm": (C, C) + pw, "wn": (C, C) + pw},
    }


_TYPES = {"afs": AfsParams, "ica": IcaParams, "rgb": StreamParams, "ir": StreamParams,
          "modnorm": ModNormParams}


def _build(tree, make_conv, prefix=""):
    fields = {}
    for key, sub in tree.items():
        name = f"{prefix}{key}"
        fields[key] = make_conv(name, sub) if isinstance(sub, tuple) else _build(sub, make_conv, name + ".")
    cls = _TYPES.get(prefix.rstrip(".").rsplit(".", 1)[-1], BlockParams)
    return cls(**fields)


def init_params(cfg: BlockConfig) -> BlockParams:
    """Seeded initialization: weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)), zero biases.

    Draw order follows :func:`iter_params`, so equal seeds give bit-identical
    parameters.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))

    def make(name, shape):
        bound = math.sqrt(1.0 / (shape[1] * shape[2] * shape[3]))
        weight = rng.uniform(-bound, bound, size=shape)
        bias = np.zeros(shape[0]) if cfg.bias_enabled else None
        return ConvParams(weight, bias)

    return _build(_conv_shapes(cfg), make)


def zero_params(cfg: BlockConfig) -> BlockParams:
    return map_params(lambda name, a: np.zeros_like(a), init_params(cfg))


def iter_params(params):
    """Yield ``(name, array)`` in serialization order.

    Order: afs.wc, afs.fd1, afs.fd2, then for rgb and ir the wq, wk, wv and
    modnorm wd, wb, wg convolutions, then ica.wm and ica.wn.  Each weight is
    immediately followed by its bias when biases are enabled.
    """
    def walk(obj, prefix):
        if isinstance(obj, ConvParams):
            yield prefix + "weight", obj.weight
            if obj.bias is not None:
                yield prefix + "bias", obj.bias
            return
        for f in dataclasses.fields(obj):
            yield from walk(getattr(obj, f.name), f"{prefix}{f.name}.")

    yield from walk(params, "")


def map_params(fn, params):
    """Rebuild ``params`` with every array replaced by ``fn(name, array)``."""
    def walk(obj, prefix):
        if isinstance(obj, ConvParams):
            weight = fn(prefix + "weight", obj.weight)  # weight first: fn may be stateful
            bias = None if obj.bias is None else fn(prefix + "bias", obj.bias)
            return ConvParams(weight, bias)
        return dataclasses.replace(obj, **{
            f.name: walk(getattr(obj, f.name), f"{prefix}{f.name}.")
            for f in dataclasses.fields(obj)})

    return walk(params, "")


def params_to_vector(params) -> np.ndarray:
    return np.concatenate([np.ravel(a) for _, a in iter_params(params)])


def params_from_vector(vec, cfg: BlockConfig) -> BlockParams:
    vec = np.asarray(vec, dtype=np.float64).ravel()
    expected = parameter_count(cfg)
    if vec.size != expected:
        raise ValueError(f"parameter vector has {vec.size} values, config needs {expected}")
    offset = 0

    def take(name, a):
        nonlocal offset
        out = vec[offset:offset + a.size].reshape(a.shape).copy()
        offset += a.size
        return out

    return map_params(take, init_params(cfg))


def parameter_count(cfg: BlockConfig) -> int:
    """Closed-form size of :class:`BlockParams`."""
    C = cfg.channels
    b = 1 if cfg.bias_enabled else 0
    conv = lambda cin, cout, k: cin * cout * k * k + b * cout  # noqa: E731
    afs = conv(2 * C, C, 1) + conv(C, C, 3) + conv(C, 2, 3)
    stream = 3 * conv(C, C, 1) + 3 * conv(C, C, 3)
    return afs + 2 * stream + 2 * conv(C, C, 1)


def check_inputs(x_rgb, x_ir, cfg: BlockConfig):
    expected = (cfg.channels, cfg.height, cfg.width)
    for name, x in (("x_rgb", x_rgb), ("x_ir", x_ir)):
        if len(x.shape) != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"{name} has shape {tuple(x.shape)}, config expects (N, {expected[0]}, "
                             f"{expected[1]}, {expected[2]})")
    if x_rgb.shape[0] != x_ir.shape[0]:
        raise ValueError("x_rgb and x_ir batch sizes differ")


def block_forward(x_rgb, x_ir, params: BlockParams, cfg: BlockConfig, xp=tensor_core):
    """Run one block and return ``(out_rgb, out_ir)`` with the input shapes.

    ``y_rgb`` carries RGB content at IR query positions and is therefore
    added to the IR stream; ``y_ir`` is added to the RGB stream.
    """
    check_inputs(x_rgb, x_ir, cfg)
    H, W, s = cfg.height, cfg.width, cfg.stride
    grid = make_reference_grid(H, W, s)
    dp = predict_offsets(x_rgb, x_ir, params.afs, s, xp)
    sampled_rgb, sampled_ir = afs_sample(x_rgb, x_ir, grid, dp, xp)
    y_rgb, y_ir = ica_forward(sampled_rgb, sampled_ir, params.ica, s, (H, W), xp)
    return xp.add(x_rgb, y_ir), xp.add(x_ir, y_rgb)


def fuse_streams(out_rgb, out_ir):
    """Elementwise sum handed to a detection head."""
    if np.shape(out_rgb) != np.shape(out_ir):
        raise ValueError(f"shape mismatch: {np.shape(out_rgb)} vs {np.shape(out_ir)}")
    return out_rgb + out_ir


def stage_config(x, stride=DEFAULT_STRIDE, seed=0, bias_enabled=True) -> BlockConfig:
    _, C, H, W = np.shape(x)
    return BlockConfig(C, H, W, stride=stride, seed=seed, bias_enabled=bias_enabled)


def multi_stage_apply(stages, params, active_stages=DEFAULT_STAGES, stride=DEFAULT_STRIDE):
    """Apply one block per active stage (1-based indices); others pass through.

    ``params`` holds one :class:`BlockParams` per active stage, in stage order.
    """
    active = sorted(set(active_stages))
    if any(i < 1 or i > len(stages) for i in active):
        raise ValueError(f"active stages {active} out of range for {len(stages)} stages")
    if len(params) != len(active):
        raise ValueError(f"{len(active)} active stages but {len(params)} parameter sets")
    by_stage = dict(zip(active, params))
    outputs = []
    for i, (x_rgb, x_ir) in enumerate(stages, start=1):
        if i not in by_stage:
            outputs.append((x_rgb, x_ir))
            continue
        cfg = stage_config(x_rgb, stride, bias_enabled=by_stage[i].ica.wm.bias is not None)
        outputs.append(block_forward(x_rgb, x_ir, by_stage[i], cfg))
    return outputs
