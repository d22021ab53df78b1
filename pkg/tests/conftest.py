import numpy as np
import pytest

from c2former.afs import AfsParams
from c2former.block import BlockConfig, BlockParams
from c2former.ica import IcaParams, StreamParams
from c2former.modnorm import ModNormParams
from c2former.tensor_core import ConvParams


def pw(rows, bias):
    return ConvParams(np.array(rows, dtype=float)[:, :, None, None], np.array(bias, dtype=float))


def pattern3(c_out, c_in, shift, step=0.25):
    o, i, dh, dw = np.indices((c_out, c_in, 3, 3))
    return ConvParams(((o + 2 * i + dh + 2 * dw + shift) % 3 - 1) * step, np.zeros(c_out))


def hand_params():
    """Small fixed integer projections and patterned 3x3 nets for C = 2."""
    mod_rgb = ModNormParams(pattern3(2, 2, 0), pattern3(2, 2, 1), pattern3(2, 2, 2))
    mod_ir = ModNormParams(pattern3(2, 2, 1), pattern3(2, 2, 2), pattern3(2, 2, 0))
    rgb = StreamParams(pw([[1, 0], [1, 1]], [0, 1]), pw([[1, -1], [0, 1]], [1, 0]),
                       pw([[2, 0], [0, 1]], [0, 0]), mod_rgb)
    ir = StreamParams(pw([[0, 1], [1, 0]], [1, 0]), pw([[1, 0], [0, -1]], [0, 0]),
                      pw([[1, 1], [0, 1]], [0, 1]), mod_ir)
    ica = IcaParams(rgb, ir, pw([[1, 0], [0, 1]], [0, 0]), pw([[1, 1], [-1, 0]], [1, 0]))
    afs = AfsParams(pw([[1, 0, -1, 0], [0, 1, 0, -1]], [0, 0]),
                    pattern3(2, 2, 0, step=0.1), pattern3(2, 2, 1, step=0.1))
    return BlockParams(afs, ica)


HAND_RGB = np.array([[[[1.0, 2.0], [3.0, 4.0]], [[0.0, 1.0], [1.0, 0.0]]]])
HAND_IR = np.array([[[[2.0, 1.0], [0.0, 1.0]], [[1.0, 1.0], [0.0, 2.0]]]])


def nested(params):
    """BlockParams -> the dict/list form used by tests/naive_oracle.py."""
    def conv(p):
        return (p.weight.tolist(), None if p.bias is None else p.bias.tolist())

    def stream(s):
        return {"wq": conv(s.wq), "wk": conv(s.wk), "wv": conv(s.wv),
                "modnorm": {"wd": conv(s.modnorm.wd), "wb": conv(s.modnorm.wb),
                            "wg": conv(s.modnorm.wg)}}

    return {
        "afs": {"wc": conv(params.afs.wc), "fd1": conv(params.afs.fd1), "fd2": conv(params.afs.fd2)},
        "ica": {"rgb": stream(params.ica.rgb), "ir": stream(params.ica.ir),
                "wm": conv(params.ica.wm), "wn": conv(params.ica.wn)},
    }


@pytest.fixture
def hand():
    return HAND_RGB.copy(), HAND_IR.copy(), hand_params(), BlockConfig(2, 2, 2, stride=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep
