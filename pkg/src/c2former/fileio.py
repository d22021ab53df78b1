"""C2TF tensor files, parameter files, PGM heatmaps and strict JSON run configs.

C2TF layout (all little-endian)::

    offset 0   4 bytes   magic "C2TF"
    offset 4   uint8     version (1)
    offset 5   uint8     ndim (1..4)
    offset 6   6 bytes   reserved, zero
    offset 12  ndim x uint64 dims
    then       prod(dims) x float64, row-major
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from c2former.analysis import CalibScenario
from c2former.block import BlockConfig, DEFAULT_STAGES, DEFAULT_STRIDE, params_from_vector, params_to_vector

MAGIC = b"C2TF"
VERSION = 1
HEADER = struct.Struct("<4sBB6x")


class TensorFileError(ValueError):
    code = "format"


class BadMagicError(TensorFileError):
    code = "bad_magic"


class UnsupportedVersionError(TensorFileError):
    code = "bad_version"


class BadRankError(TensorFileError):
    code = "bad_ndim"


class PayloadLengthError(TensorFileError):
    code = "bad_length"


def encode_tensor(t) -> bytes:
    t = np.asarray(t, dtype="<f8")
    if not 1 <= t.ndim <= 4:
        raise BadRankError(f"tensor rank {t.ndim} outside 1..4")
    if any(d < 1 for d in t.shape):
        raise TensorFileError(f"empty extent in shape {t.shape}")
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    return HEADER.pack(MAGIC, VERSION, t.ndim) + dims + np.ascontiguousarray(t).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER.size:
        raise PayloadLengthError(f"file too short for a header ({len(buf)} bytes)")
    magic, version, ndim = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if not 1 <= ndim <= 4:
        raise BadRankError(f"ndim {ndim} outside 1..4")
    dims_end = HEADER.size + 8 * ndim
    if len(buf) < dims_end:
        raise PayloadLengthError("truncated dimension table")
    dims = struct.unpack_from(f"<{ndim}Q", buf, HEADER.size)
    count = int(np.prod(dims, dtype=object))
    if len(buf) - dims_end != 8 * count:
        raise PayloadLengthError(f"payload is {len(buf) - dims_end} bytes, dims {dims} need {8 * count}")
    return np.frombuffer(buf, dtype="<f8", offset=dims_end).astype(np.float64).reshape(dims)


def write_tensor(path, t):
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_params(path, params):
    """Store all parameters as one flat C2TF vector, in ``iter_params`` order."""
    write_tensor(path, params_to_vector(params))


def read_params(path, cfg: BlockConfig):
    vec = read_tensor(path)
    if vec.ndim != 1:
        raise TensorFileError(f"parameter file must hold a vector, got shape {vec.shape}")
    try:
        return params_from_vector(vec, cfg)
    except ValueError as exc:
        raise PayloadLengthError(str(exc)) from None


def pgm_bytes(m) -> bytes:
    """Binary P5 graymap, min-max scaled to 0..255; constant maps become 128."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("map contains non-finite values")
    lo, hi = m.min(), m.max()
    if hi > lo:
        pix = np.rint((m - lo) / (hi - lo) * 255.0)
    else:
        pix = np.full(m.shape, 128.0)
    rows, cols = m.shape
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pix.astype(np.uint8).tobytes()


def emit_pgm(m, path):
    Path(path).write_bytes(pgm_bytes(m))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    channels: int
    height: int
    width: int
    stride: int = DEFAULT_STRIDE
    seed: int = 0
    active_stages: tuple = DEFAULT_STAGES
    bias_enabled: bool = True
    shift: tuple = (3, 2)
    noise_std: float = 0.0
    smoothing: int = 2

    def block_config(self) -> BlockConfig:
        return BlockConfig(self.channels, self.height, self.width, self.stride, self.seed,
                           self.bias_enabled)

    def scenario(self) -> CalibScenario:
        return CalibScenario(self.channels, self.height, self.width, self.shift, self.noise_std,
                             self.seed, self.smoothing)


# JSON key -> (field name, type check)
_KEYS = {
    "channels": ("channels", int),
    "height": ("height", int),
    "width": ("width", int),
    "stride": ("stride", int),
    "seed": ("seed", int),
    "activeStages": ("active_stages", list),
    "biasEnabled": ("bias_enabled", bool),
    "shift": ("shift", list),
    "noiseStd": ("noise_std", (int, float)),
    "smoothing": ("smoothing", int),
}
_REQUIRED = ("channels", "height", "width")


def parse_config(obj) -> RunConfig:
    """Validate a decoded JSON object; unknown keys are rejected."""
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(obj) - set(_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise ConfigError(f"missing config keys: {', '.join(missing)}")
    kwargs = {}
    for key, value in obj.items():
        name, typ = _KEYS[key]
        if isinstance(value, bool) and typ is not bool:
            raise ConfigError(f"{key} must not be a boolean")
        if not isinstance(value, typ):
            raise ConfigError(f"{key} has the wrong type ({type(value).__name__})")
        kwargs[name] = value
    if "shift" in kwargs:
        shift = kwargs["shift"]
        if len(shift) != 2 or not all(isinstance(v, int) and not isinstance(v, bool) for v in shift):
            raise ConfigError("shift must be two integers [dy, dx]")
        kwargs["shift"] = tuple(shift)
    if "active_stages" in kwargs:
        stages = kwargs["active_stages"]
        if not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in stages):
            raise ConfigError("activeStages must be positive integers")
        kwargs["active_stages"] = tuple(stages)
    if kwargs.get("noise_std", 0) < 0 or kwargs.get("smoothing", 0) < 0:
        raise ConfigError("noiseStd and smoothing must be non-negative")
    cfg = RunConfig(**kwargs)
    try:
        cfg.block_config()
        cfg.scenario()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(obj)
