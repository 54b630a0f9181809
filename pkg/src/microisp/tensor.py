"""Forward and backward kernels for the handful of ops the network needs.

Tensors are plain ``numpy`` arrays laid out as ``(H, W, C)`` (row-major,
channel fastest). Every kernel also accepts an optional leading batch axis,
``(N, H, W, C)``, which the training loop uses to process a mini-batch in one
pass. Kernels preserve the dtype of their inputs, so the same code runs in
float32 for training/inference and in float64 for gradient checking.

Convolutions gather their taps into a column matrix ordered (kernel row,
kernel column, input channel) and reduce it with a single matrix product, so
the accumulation layout is fixed and results are bitwise reproducible for a
given input shape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError

__all__ = [
    "ConvWeights",
    "Tape",
    "Var",
    "add",
    "channel_scale",
    "concat_channels",
    "conv2d",
    "conv2d_vjp",
    "depth_to_space",
    "global_avg_pool",
    "leaky_relu",
    "prelu",
    "sigmoid",
    "space_to_depth",
    "vjp",
]


@dataclass
class ConvWeights:
    """Kernel of shape ``(kh, kw, c_in, c_out)`` and bias of shape ``(c_out,)``."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ContractError(f"kernel must be 4-D, got shape {self.kernel.shape}")
        kh, kw, _, c_out = self.kernel.shape
        if kh not in (1, 3) or kw not in (1, 3):
            raise ContractError(f"kernel size must be 1 or 3, got {kh}x{kw}")
        if self.bias.shape != (c_out,):
            raise ContractError(f"bias shape {self.bias.shape} != ({c_out},)")

    @property
    def c_in(self) -> int:
        return self.kernel.shape[2]

    @property
    def c_out(self) -> int:
        return self.kernel.shape[3]


def _check_tensor(x: np.ndarray, name: str = "x") -> None:
    if not isinstance(x, np.ndarray) or x.ndim not in (3, 4):
        raise ContractError(f"{name} must be an (H, W, C) or (N, H, W, C) array")


def _same_padding(n: int, k: int, stride: int) -> tuple[int, int, int]:
    # output size, pad before, pad after (odd remainder goes after)
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


def _pad_spatial(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    if top == bottom == left == right == 0:
        return x
    h, w = x.shape[-3], x.shape[-2]
    out = np.zeros(x.shape[:-3] + (h + top + bottom, w + left + right, x.shape[-1]), dtype=x.dtype)
    out[..., top:top + h, left:left + w, :] = x
    return out


def _conv_geometry(x: np.ndarray, kernel: np.ndarray, stride: int):
    kh, kw = kernel.shape[:2]
    h, w = x.shape[-3], x.shape[-2]
    oh, pt, pb = _same_padding(h, kh, stride)
    ow, pl, pr = _same_padding(w, kw, stride)
    return oh, ow, (pt, pb, pl, pr)


def _tap(xp: np.ndarray, ky: int, kx: int, oh: int, ow: int, stride: int) -> np.ndarray:
    return xp[..., ky:ky + stride * (oh - 1) + 1:stride, kx:kx + stride * (ow - 1) + 1:stride, :]


def _im2col(xp, kh, kw, oh, ow, stride):
    # columns ordered (kernel row, kernel col, in-channel), matching kernel.reshape(-1, c_out)
    c_in = xp.shape[-1]
    cols = np.empty(xp.shape[:-3] + (oh, ow, kh * kw * c_in), dtype=xp.dtype)
    t = 0
    for ky in range(kh):
        for kx in range(kw):
            cols[..., t:t + c_in] = _tap(xp, ky, kx, oh, ow, stride)
            t += c_in
    return cols.reshape(-1, kh * kw * c_in)


def _conv2d(x, kernel, bias, stride=1):
    _check_tensor(x)
    if stride not in (1, 3):
        raise ContractError(f"stride must be 1 or 3, got {stride}")
    kh, kw, c_in, c_out = kernel.shape
    if x.shape[-1] != c_in:
        raise ContractError(f"conv2d: input has {x.shape[-1]} channels, kernel expects {c_in}")
    oh, ow, pads = _conv_geometry(x, kernel, stride)
    if kh == kw == stride == 1:
        cols = np.ascontiguousarray(x).reshape(-1, c_in)
    else:
        cols = _im2col(_pad_spatial(x, *pads), kh, kw, oh, ow, stride)
    out = cols @ kernel.reshape(-1, c_out)
    out += bias
    return out.reshape(x.shape[:-3] + (oh, ow, c_out))


def _conv2d_backward(x, kernel, stride, gy):
    kh, kw, c_in, c_out = kernel.shape
    oh, ow, pads = _conv_geometry(x, kernel, stride)
    if gy.shape != x.shape[:-3] + (oh, ow, c_out):
        raise ContractError(f"conv2d_vjp: upstream grad shape {gy.shape} does not match output "
                            f"{x.shape[:-3] + (oh, ow, c_out)}")
    g2 = np.ascontiguousarray(gy).reshape(-1, c_out)
    gb = g2.sum(axis=0)
    if kh == kw == stride == 1:
        cols = np.ascontiguousarray(x).reshape(-1, c_in)
        gk = (cols.T @ g2).reshape(kernel.shape)
        gx = (g2 @ kernel.reshape(c_in, c_out).T).reshape(x.shape)
        return gx, gk, gb
    xp = _pad_spatial(x, *pads)
    cols = _im2col(xp, kh, kw, oh, ow, stride)
    gk = (cols.T @ g2).reshape(kernel.shape)
    gcols = (g2 @ kernel.reshape(-1, c_out).T).reshape(gy.shape[:-1] + (kh * kw * c_in,))
    gxp = np.zeros_like(xp)
    t = 0
    for ky in range(kh):
        for kx in range(kw):
            _tap(gxp, ky, kx, oh, ow, stride)[...] += gcols[..., t:t + c_in]
            t += c_in
    pt, pb, pl, pr = pads
    gx = gxp[..., pt:gxp.shape[-3] - pb, pl:gxp.shape[-2] - pr, :]
    return np.ascontiguousarray(gx), gk, gb


class _KinkState(threading.local):
    def __init__(self):
        self.mode = None  # None, "record" or "replay"
        self.masks: list[np.ndarray] = []
        self.pos = 0
        self.flips = 0

    def replay(self) -> None:
        """Start a new forward pass that reuses the recorded masks."""
        self.mode, self.pos = "replay", 0


_kinks = _KinkState()


@contextmanager
def frozen_activation_masks() -> Iterator[_KinkState]:
    """Pins the positive/negative pattern of every (P/Leaky)ReLU.

    The first forward pass inside the context records each activation's
    ``x >= 0`` mask; every later pass reuses them in call order via
    :meth:`_KinkState.replay`. A finite-difference probe evaluated this way stays on the
    linear piece of the base point instead of straddling a kink; ``flips``
    counts how many unit signs would have changed.
    """
    state = _kinks
    state.mode, state.masks, state.pos, state.flips = "record", [], 0, 0
    try:
        yield state
    finally:
        state.mode, state.masks = None, []


def _activation_mask(x):
    mask = x >= 0
    if _kinks.mode == "record":
        _kinks.masks.append(mask)
    elif _kinks.mode == "replay":
        frozen = _kinks.masks[_kinks.pos]
        _kinks.pos += 1
        _kinks.flips += int(np.count_nonzero(frozen != mask))
        mask = frozen
    return mask


def _prelu(x, alpha):
    _check_tensor(x)
    if alpha.shape != (x.shape[-1],):
        raise ContractError(f"prelu: alpha has shape {alpha.shape}, input has {x.shape[-1]} channels")
    return np.where(_activation_mask(x), x, alpha * x)


def _prelu_backward(x, alpha, gy):
    neg = x < 0
    gx = np.where(neg, alpha * gy, gy)
    ga = np.where(neg, x * gy, 0).reshape(-1, x.shape[-1]).sum(axis=0).astype(alpha.dtype)
    return gx, ga


def _leaky_relu(x, slope=0.2):
    _check_tensor(x)
    alpha = np.full(x.shape[-1], slope, dtype=x.dtype)
    return np.where(_activation_mask(x), x, alpha * x)


def _leaky_relu_backward(x, gy, slope=0.2):
    alpha = np.full(x.shape[-1], slope, dtype=x.dtype)
    return np.where(x < 0, alpha * gy, gy)


def _space_to_depth(x, block=2):
    _check_tensor(x)
    *lead, h, w, c = x.shape
    if h % block or w % block:
        raise ContractError(f"space_to_depth: spatial dims {h}x{w} not divisible by {block}")
    y = x.reshape(*lead, h // block, block, w // block, block, c)
    y = np.moveaxis(y, -4, -3)  # (..., h/b, w/b, by, bx, c)
    return np.ascontiguousarray(y).reshape(*lead, h // block, w // block, block * block * c)


def _depth_to_space(x, block=2):
    _check_tensor(x)
    *lead, h, w, c = x.shape
    if c % (block * block):
        raise ContractError(f"depth_to_space: {c} channels not divisible by {block * block}")
    y = x.reshape(*lead, h, w, block, block, c // (block * block))
    y = np.moveaxis(y, -3, -4)  # (..., h, by, w, bx, c')
    return np.ascontiguousarray(y).reshape(*lead, h * block, w * block, c // (block * block))


def _global_avg_pool(x):
    _check_tensor(x)
    return x.mean(axis=(-3, -2), keepdims=True, dtype=np.float64).astype(x.dtype)


def _global_avg_pool_backward(x, gy):
    n = x.shape[-3] * x.shape[-2]
    return np.broadcast_to(gy / x.dtype.type(n), x.shape).copy()


def _sigmoid(x):
    one = x.dtype.type(1)
    with np.errstate(over="ignore"):
        return one / (one + np.exp(-x))


def _add(a, b):
    if a.shape != b.shape:
        raise ContractError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def _channel_scale(x, s):
    _check_tensor(x)
    if s.shape[-3:] != (1, 1, x.shape[-1]) or s.shape[:-3] != x.shape[:-3]:
        raise ContractError(f"channel_scale: scale shape {s.shape} incompatible with {x.shape}")
    return x * s


def _concat(*xs):
    if not xs:
        raise ContractError("concat_channels: need at least one tensor")
    for t in xs:
        _check_tensor(t)
        if t.shape[:-1] != xs[0].shape[:-1]:
            raise ContractError(f"concat_channels: spatial mismatch {t.shape} vs {xs[0].shape}")
    return np.concatenate(xs, axis=-1)


# ---------------------------------------------------------------------------
# op registry: forward kernel plus a backward rule taking
# (inputs, attrs, output, upstream) and returning one gradient per input

def _vjp_conv2d(inputs, attrs, out, g):
    x, kernel, _ = inputs
    return _conv2d_backward(x, kernel, attrs.get("stride", 1), g)


def _vjp_prelu(inputs, attrs, out, g):
    return _prelu_backward(inputs[0], inputs[1], g)


def _vjp_leaky(inputs, attrs, out, g):
    return (_leaky_relu_backward(inputs[0], g, attrs.get("slope", 0.2)),)


def _vjp_sigmoid(inputs, attrs, out, g):
    return (g * out * (1 - out),)


def _vjp_channel_scale(inputs, attrs, out, g):
    x, s = inputs
    gs = (g * x).sum(axis=(-3, -2), keepdims=True)
    return g * s, gs


def _vjp_concat(inputs, attrs, out, g):
    grads, start = [], 0
    for t in inputs:
        c = t.shape[-1]
        grads.append(np.ascontiguousarray(g[..., start:start + c]))
        start += c
    return tuple(grads)


_OPS: dict[str, tuple[Callable, Callable]] = {
    "conv2d": (_conv2d, _vjp_conv2d),
    "prelu": (_prelu, _vjp_prelu),
    "leaky_relu": (_leaky_relu, _vjp_leaky),
    "space_to_depth": (_space_to_depth, lambda i, a, o, g: (_depth_to_space(g, a.get("block", 2)),)),
    "depth_to_space": (_depth_to_space, lambda i, a, o, g: (_space_to_depth(g, a.get("block", 2)),)),
    "global_avg_pool": (_global_avg_pool, lambda i, a, o, g: (_global_avg_pool_backward(i[0], g),)),
    "sigmoid": (_sigmoid, _vjp_sigmoid),
    "add": (_add, lambda i, a, o, g: (g, g)),
    "channel_scale": (_channel_scale, _vjp_channel_scale),
    "concat_channels": (_concat, _vjp_concat),
}

OP_IDS = tuple(_OPS)


def forward_op(op_id: str, inputs: Sequence[np.ndarray], **attrs) -> np.ndarray:
    try:
        fn = _OPS[op_id][0]
    except KeyError:
        raise ContractError(f"unknown op id {op_id!r}") from None
    return fn(*inputs, **attrs)


def vjp(op_id: str, inputs: Sequence[np.ndarray], upstream: np.ndarray,
        output: np.ndarray | None = None, **attrs) -> tuple[np.ndarray, ...]:
    """Gradients of ``op_id`` w.r.t. each of its inputs, given the saved
    forward inputs and the gradient flowing into its output.

    ``output`` is only needed by ops whose backward rule reuses the forward
    result (sigmoid); it is recomputed when omitted.
    """
    try:
        fwd, rule = _OPS[op_id]
    except KeyError:
        raise ContractError(f"unknown op id {op_id!r}") from None
    if output is None and op_id == "sigmoid":
        output = fwd(*inputs, **attrs)
    return tuple(rule(tuple(inputs), attrs, output, upstream))


# ---------------------------------------------------------------------------
# public functional API

def conv2d(x: np.ndarray, w: ConvWeights, stride: int = 1) -> np.ndarray:
    """"Same"-padded 2-D convolution; output is ``ceil(H/stride) x ceil(W/stride) x c_out``."""
    return _conv2d(x, w.kernel, w.bias, stride=stride)


def conv2d_vjp(x: np.ndarray, w: ConvWeights, stride: int, upstream: np.ndarray):
    """Returns ``(grad_x, ConvWeights(grad_kernel, grad_bias))``."""
    gx, gk, gb = _conv2d_backward(x, w.kernel, stride, upstream)
    return gx, ConvWeights(gk, gb)


def prelu(x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    return _prelu(x, alpha)


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return _leaky_relu(x, slope)


def space_to_depth(x: np.ndarray, block: int = 2) -> np.ndarray:
    """Packs each ``block x block`` cell into channels, scanning the cell row-major."""
    return _space_to_depth(x, block)


def depth_to_space(x: np.ndarray, block: int = 2) -> np.ndarray:
    return _depth_to_space(x, block)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return _global_avg_pool(x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return _sigmoid(x)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _add(a, b)


def channel_scale(x: np.ndarray, s: np.ndarray) -> np.ndarray:
    return _channel_scale(x, s)


def concat_channels(xs: Sequence[np.ndarray]) -> np.ndarray:
    return _concat(*xs)


# ---------------------------------------------------------------------------
# tape

class Var:
    """A value produced on a :class:`Tape`."""

    __slots__ = ("data", "index", "name")

    def __init__(self, data: np.ndarray, index: int, name: str | None = None):
        self.data = data
        self.index = index
        self.name = name

    @property
    def shape(self):
        return self.data.shape


class Tape:
    """Records ops as they run so gradients can be pulled back through them.

    With ``record=False`` the tape only evaluates, which is what inference
    uses; the forward code path is identical either way.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._records: list[tuple[str, tuple[Var, ...], dict, Var]] = []
        self._count = 0

    def _new(self, data, name=None) -> Var:
        v = Var(data, self._count, name)
        self._count += 1
        return v

    def leaf(self, data: np.ndarray, name: str | None = None) -> Var:
        return self._new(data, name)

    def apply(self, op_id: str, inputs: Sequence[Var], **attrs) -> Var:
        out = self._new(forward_op(op_id, [v.data for v in inputs], **attrs))
        if self.record:
            self._records.append((op_id, tuple(inputs), attrs, out))
        return out

    def __len__(self):
        return len(self._records)

    def backward(self, out: Var, upstream: np.ndarray) -> dict[int, np.ndarray]:
        """Reverse traversal of the tape. Returns gradients keyed by ``Var.index``
        for every value the output depends on."""
        if not self.record:
            raise ContractError("backward on a tape created with record=False")
        if upstream.shape != out.shape:
            raise ContractError(f"upstream grad shape {upstream.shape} != output shape {out.shape}")
        grads: dict[int, np.ndarray] = {out.index: upstream}
        for op_id, inputs, attrs, res in reversed(self._records):
            g = grads.pop(res.index, None)
            if g is None:
                continue
            in_grads = vjp(op_id, [v.data for v in inputs], g, output=res.data, **attrs)
            for v, gv in zip(inputs, in_grads):
                if v.index in grads:
                    grads[v.index] = grads[v.index] + gv
                else:
                    grads[v.index] = gv
        return grads

    def named_grads(self, grads: dict[int, np.ndarray], leaves: dict[str, Var]) -> dict[str, np.ndarray]:
        out = {}
        for name, v in leaves.items():
            g = grads.get(v.index)
            out[name] = np.zeros_like(v.data) if g is None else g
        return out
