"""Tape-based reverse mode over the block's op set, and a central-difference oracle.

A :class:`Tape` exposes the same op names as :mod:`c2former.tensor_core`, so
block code called with ``xp=tape`` records a graph instead of just computing
values.  Each recorded node keeps its op kind, parent nodes and whatever
activations its adjoint needs; adjoints live in the ``VJP`` registry keyed by
op kind.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from c2former import tensor_core as tc


class UnrecordedOpError(KeyError):
    """A node's op kind has no registered adjoint."""


class Node:
    __slots__ = ("value", "op", "parents", "saved", "index", "name")

    def __init__(self, value, op, parents, saved, index, name=None):
        self.value = value
        self.op = op
        self.parents = parents
        self.saved = saved
        self.index = index
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Node({self.op}, shape={self.shape}, name={self.name!r})"


def _val(a):
    return a.value if isinstance(a, Node) else a


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    """Records a forward pass; :meth:`backward` returns gradients for named leaves."""

    def __init__(self):
        self.nodes = []

    def _record(self, op, value, parents, name=None, **saved):
        node = Node(value, op, tuple(p if isinstance(p, Node) else None for p in parents),
                    saved, len(self.nodes), name)
        self.nodes.append(node)
        return node

    def leaf(self, value, name=None):
        return self._record("leaf", np.asarray(value, dtype=np.float64), (), name=name)

    # ops mirroring tensor_core -------------------------------------------------

    def conv2d(self, x, p):
        w, b = p.weight, p.bias
        value = tc.conv2d_raw(_val(x), _val(w), None if b is None else _val(b))
        parents = (x, w) if b is None else (x, w, b)
        return self._record("conv2d", value, parents, x=_val(x), weight=_val(w))

    def relu(self, x):
        return self._record("relu", tc.relu(_val(x)), (x,), x=_val(x))

    def scaled_tanh(self, x):
        t = np.tanh(_val(x))
        return self._record("scaled_tanh", 2.0 * t, (x,), t=t)

    def softmax_rows(self, m):
        s = tc.softmax_rows(_val(m))
        return self._record("softmax_rows", s, (m,), s=s)

    def matmul(self, a, b):
        return self._record("matmul", tc.matmul(_val(a), _val(b)), (a, b), a=_val(a), b=_val(b))

    def transpose(self, a):
        return self._record("transpose", tc.transpose(_val(a)), (a,))

    def add(self, a, b):
        va, vb = _val(a), _val(b)
        return self._record("add", va + vb, (a, b), shapes=(np.shape(va), np.shape(vb)))

    def mul(self, a, b):
        va, vb = _val(a), _val(b)
        return self._record("mul", va * vb, (a, b), a=va, b=vb)

    def scale(self, a, c):
        return self._record("scale", _val(a) * c, (a,), c=c)

    def concat_channels(self, a, b):
        va = _val(a)
        return self._record("concat_channels", tc.concat_channels(va, _val(b)), (a, b),
                            split=va.shape[1])

    def to_descriptors(self, x):
        return self._record("to_descriptors", tc.to_descriptors(_val(x)), (x,), shape=_val(x).shape)

    def from_descriptors(self, d, H, W):
        return self._record("from_descriptors", tc.from_descriptors(_val(d), H, W), (d,))

    def instance_norm(self, x):
        mu, sigma = tc.instance_stats(_val(x))
        y = (_val(x) - mu[:, :, None, None]) / sigma[:, :, None, None]
        return self._record("instance_norm", y, (x,), y=y, sigma=sigma[:, :, None, None])

    def channel_mean(self, x):
        return self._record("channel_mean", tc.channel_mean(_val(x)), (x,), shape=_val(x).shape)

    def channel_std(self, x):
        mu, sigma = tc.instance_stats(_val(x))
        centered = _val(x) - mu[:, :, None, None]
        return self._record("channel_std", sigma[:, :, None, None], (x,), centered=centered)

    def bilinear_sample(self, x, coords):
        vx, vc = _val(x), _val(coords)
        return self._record("bilinear_sample", tc.bilinear_sample(vx, vc), (x, coords), x=vx, coords=vc)

    def deconv1x1_stride(self, y, p, stride, out_size=None):
        w, b = p.weight, p.bias
        params = tc.ConvParams(_val(w), None if b is None else _val(b))
        value = tc.deconv1x1_stride(_val(y), params, stride, out_size)
        parents = (y, w) if b is None else (y, w, b)
        return self._record("deconv1x1_stride", value, parents, y=_val(y), weight=_val(w),
                            stride=stride)

    def pick_reference(self, field, stride):
        return self._record("pick_reference", tc.pick_reference(_val(field), stride), (field,),
                            shape=_val(field).shape, stride=stride)

    def total(self, x):
        return self._record("total", np.asarray(tc.total(_val(x))), (x,), shape=_val(x).shape)

    # reverse sweep -------------------------------------------------------------

    def backward(self, out: Node, seed: float = 1.0):
        """Propagate ``seed`` from scalar ``out`` back to every named leaf.

        Returns ``{leaf name: gradient}``; leaves the output does not depend on
        get zero gradients.
        """
        if out.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {out.shape}")
        grads = {out.index: np.full(out.shape, float(seed))}
        result = {}
        for node in reversed(self.nodes[:out.index + 1]):
            g = grads.pop(node.index, None)
            if node.op == "leaf":
                if node.name is not None:
                    result[node.name] = g if g is not None else np.zeros_like(node.value)
                continue
            if g is None:
                continue
            try:
                vjp = VJP[node.op]
            except KeyError:
                raise UnrecordedOpError(f"no adjoint registered for op {node.op!r}") from None
            for parent, gp in zip(node.parents, vjp(g, node)):
                if parent is None or gp is None:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + gp
                else:
                    grads[parent.index] = gp
        return result


# adjoints: (upstream gradient, node) -> tuple of parent gradients -------------

def _vjp_conv2d(g, node):
    dx, dw, db = tc.conv2d_backward(g, node.saved["x"], node.saved["weight"])
    return (dx, dw, db)[:len(node.parents)]


def _vjp_softmax(g, node):
    s = node.saved["s"]
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def _vjp_matmul(g, node):
    a, b = node.saved["a"], node.saved["b"]
    return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


def _vjp_add(g, node):
    sa, sb = node.saved["shapes"]
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _vjp_mul(g, node):
    a, b = node.saved["a"], node.saved["b"]
    return _unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b))


def _vjp_concat(g, node):
    k = node.saved["split"]
    return g[:, :k], g[:, k:]


def _vjp_to_descriptors(g, node):
    N, C, H, W = node.saved["shape"]
    return (tc.from_descriptors(g, H, W),)


def _vjp_from_descriptors(g, node):
    return (tc.to_descriptors(g),)


def _vjp_instance_norm(g, node):
    y, sigma = node.saved["y"], node.saved["sigma"]
    g_mean = g.mean(axis=(2, 3), keepdims=True)
    gy_mean = (g * y).mean(axis=(2, 3), keepdims=True)
    return ((g - g_mean - y * gy_mean) / sigma,)


def _vjp_channel_mean(g, node):
    N, C, H, W = node.saved["shape"]
    return (np.broadcast_to(g / (H * W), (N, C, H, W)).copy(),)


def _vjp_channel_std(g, node):
    centered = node.saved["centered"]
    hw = centered.shape[2] * centered.shape[3]
    sigma = np.sqrt((centered ** 2).mean(axis=(2, 3), keepdims=True) + tc.EPS)
    return (g * centered / (hw * sigma),)


def _vjp_bilinear(g, node):
    return tc.bilinear_sample_backward(g, node.saved["x"], node.saved["coords"])


def _vjp_deconv(g, node):
    s = node.saved["stride"]
    y, w = node.saved["y"], node.saved["weight"]
    Hs, Ws = y.shape[2:]
    g_sites = g[:, :, :Hs * s:s, :Ws * s:s]
    dy = np.einsum("oi,nohw->nihw", w[:, :, 0, 0], g_sites)
    dw = np.einsum("nohw,nihw->oi", g_sites, y)[:, :, None, None]
    db = g.sum(axis=(0, 2, 3))
    return (dy, dw, db)[:len(node.parents)]


def _vjp_pick_reference(g, node):
    s = node.saved["stride"]
    out = np.zeros(node.saved["shape"])
    Hs, Ws = g.shape[1:3]
    out[:, :, :Hs * s:s, :Ws * s:s] = g.transpose(0, 3, 1, 2)
    return (out,)


VJP = {
    "conv2d": _vjp_conv2d,
    "relu": lambda g, n: (g * (n.saved["x"] > 0),),
    "scaled_tanh": lambda g, n: (2.0 * g * (1.0 - n.saved["t"] ** 2),),
    "softmax_rows": _vjp_softmax,
    "matmul": _vjp_matmul,
    "transpose": lambda g, n: (np.swapaxes(g, -1, -2),),
    "add": _vjp_add,
    "mul": _vjp_mul,
    "scale": lambda g, n: (g * n.saved["c"],),
    "concat_channels": _vjp_concat,
    "to_descriptors": _vjp_to_descriptors,
    "from_descriptors": _vjp_from_descriptors,
    "instance_norm": _vjp_instance_norm,
    "channel_mean": _vjp_channel_mean,
    "channel_std": _vjp_channel_std,
    "bilinear_sample": _vjp_bilinear,
    "deconv1x1_stride": _vjp_deconv,
    "pick_reference": _vjp_pick_reference,
    "total": lambda g, n: (np.broadcast_to(g, n.saved["shape"]).copy(),),
}


def finite_diff_oracle(f, at, h=1e-5, dtype=np.float64):
    """Central differences of scalar ``f`` at ``at`` (a dict of name -> array).

    ``f`` receives a dict with the same keys, holding arrays of ``dtype``.
    Returns a dict of float64 gradients.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    point = {k: np.array(v, dtype=dtype) for k, v in at.items()}
    grads = {}
    for name, arr in point.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(point)
            flat[i] = orig - h
            f_minus = f(point)
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2 * h)
        grads[name] = g.astype(np.float64)
    return grads


def relative_error(analytic, oracle):
    a, o = np.asarray(analytic), np.asarray(oracle)
    return np.abs(a - o) / np.maximum(1e-8, np.abs(a) + np.abs(o))


@dataclass
class GradcheckReport:
    max_rel_err: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def failing(self, tol=None):
        tol = self.tol if tol is None else tol
        return [k for k, v in self.max_rel_err.items() if v > tol]

    def to_csv(self) -> str:
        rows = ["group,max_rel_err"]
        rows += [f"{k},{v:.3e}" for k, v in self.max_rel_err.items()]
        return "\n".join(rows) + "\n"


def block_gradients(x_rgb, x_ir, params, cfg):
    """Analytic gradients of ``sum(out_rgb) + sum(out_ir)``.

    Keys are parameter names from :func:`c2former.block.iter_params` plus
    ``x_rgb`` and ``x_ir``.
    """
    from c2former.block import block_forward, map_params

    tape = Tape()
    p_nodes = map_params(lambda name, a: tape.leaf(a, name), params)
    xr, xi = tape.leaf(x_rgb, "x_rgb"), tape.leaf(x_ir, "x_ir")
    out_rgb, out_ir = block_forward(xr, xi, p_nodes, cfg, xp=tape)
    loss = tape.add(tape.total(out_rgb), tape.total(out_ir))
    return tape.backward(loss)


def _exact_sum(outputs):
    return sum(np.sum(out, dtype=np.longdouble) for out in outputs)


def gradcheck_report(cfg, seed=None, params=None, inputs=None, h=1e-5, tol=1e-4):
    """Compare tape gradients of ``sum(block_forward)`` with central differences.

    Inputs default to ``U(-1, 1)`` draws from ``seed`` (falling back to
    ``cfg.seed``); parameters default to ``init_params(cfg)``.

    The oracle evaluates the forward pass in extended precision
    (``np.longdouble``).  Some gradients are structurally zero (a key bias
    shifts every logit of a row equally, which softmax ignores), and float64
    rounding divided by ``2h`` would sit far above the 1e-8 error floor.
    """
    from c2former.block import block_forward, init_params, iter_params, map_params

    if params is None:
        params = init_params(cfg)
    if inputs is None:
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        shape = (1, cfg.channels, cfg.height, cfg.width)
        inputs = rng.uniform(-1, 1, size=shape), rng.uniform(-1, 1, size=shape)
    x_rgb, x_ir = inputs

    analytic = block_gradients(x_rgb, x_ir, params, cfg)

    def f(point):
        p = map_params(lambda name, a: point[name], params)
        return _exact_sum(block_forward(point["x_rgb"], point["x_ir"], p, cfg))

    at = dict(iter_params(params))
    at["x_rgb"], at["x_ir"] = x_rgb, x_ir
    oracle = finite_diff_oracle(f, at, h, dtype=np.longdouble)
    report = GradcheckReport(tol=tol)
    for name in at:
        err = relative_error(analytic[name], oracle[name])
        report.max_rel_err[name] = float(err.max()) if err.size else 0.0
    return report
