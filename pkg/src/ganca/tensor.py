"""Dense float32 tensors with define-by-run reverse-mode differentiation.

Every differentiable op in this module computes its forward result with
numpy and, when a :class:`Tape` is active and at least one input requires a
gradient, appends a node holding a backward closure. ``backward`` then walks
the tape in reverse.

Image-like tensors are channels-last: ``(H, W, C)`` or batched
``(B, H, W, C)``. There is no broadcasting; binary ops require equal shapes.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, UsageError

DTYPE = np.float32

# Assert finiteness after every forward op. Off by default; costs a full scan.
DEBUG = os.environ.get("GANCA_DEBUG", "") not in ("", "0")


class Tensor:
    """A float32 array plus the bookkeeping needed for autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of the ops executed while the tape is active.

    Use as a context manager; nodes are appended in execution order, so
    inputs always precede the nodes that consume them.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None):
        return backward(loss, self, wrt)

    def clear(self) -> None:
        """Drop all nodes. Outputs forget their node so the arrays free by refcount."""
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(op, inputs, out, bwd)
        out._node = node
        tape.nodes.append(node)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ConfigError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# convolutions


def _batched(x: np.ndarray, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ConfigError(f"{op}: expected (H, W, C) or (B, H, W, C), got {x.shape}")


def _im2col(xp: np.ndarray, ho: int, wo: int, stride: int) -> np.ndarray:
    # (B, Ho, Wo, 9 * C) with column order (dy, dx, c), matching
    # weight.reshape(9 * Cin, Cout).
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    b, c = xp.shape[0], xp.shape[3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b, ho, wo, 9 * c)


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding of one cell on every side.

    ``weight`` has shape ``(3, 3, Cin, Cout)``; with ``stride=2`` the output
    is ``ceil(H/2) x ceil(W/2)``.
    """
    xd, squeeze = _batched(x.data, "conv3x3")
    cin = xd.shape[-1]
    if weight.data.ndim != 4 or weight.shape[:3] != (3, 3, cin):
        raise ConfigError(f"conv3x3: weight {weight.shape} does not fit input {x.shape}")
    cout = weight.shape[3]
    if bias.shape != (cout,):
        raise ConfigError(f"conv3x3: bias {bias.shape} does not fit Cout={cout}")
    if stride not in (1, 2):
        raise ConfigError(f"conv3x3: unsupported stride {stride}")

    b, h, w, _ = xd.shape
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    xp = np.pad(xd, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col(xp, ho, wo, stride).reshape(-1, 9 * cin)
    wmat = weight.data.reshape(9 * cin, cout)
    out = cols @ wmat
    out += bias.data
    out = out.reshape(b, ho, wo, cout)
    if squeeze:
        out = out[0]

    def bwd(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(weight.shape)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(b, ho, wo, 9, cin)
            taps = np.ascontiguousarray(dcols.transpose(3, 0, 1, 2, 4))
            gxp = np.zeros((b, h + 2, w + 2, cin), dtype=DTYPE)
            s = stride
            for k in range(9):
                dy, dx = divmod(k, 3)
                gxp[:, dy : dy + s * (ho - 1) + 1 : s, dx : dx + s * (wo - 1) + 1 : s] += taps[k]
            gx = gxp[:, 1 : h + 1, 1 : w + 1]
            if squeeze:
                gx = gx[0]
        return gx, gw, gb

    return _result("conv3x3", out, (x, weight, bias), bwd)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-cell linear map: ``out[..., o] = bias[o] + sum_i x[..., i] * weight[i, o]``."""
    cin = x.shape[-1]
    if x.data.ndim not in (3, 4):
        raise ConfigError(f"conv1x1: expected (H, W, C) or (B, H, W, C), got {x.shape}")
    if weight.data.ndim != 2 or weight.shape[0] != cin:
        raise ConfigError(f"conv1x1: weight {weight.shape} does not fit input {x.shape}")
    cout = weight.shape[1]
    if bias.shape != (cout,):
        raise ConfigError(f"conv1x1: bias {bias.shape} does not fit Cout={cout}")
    x2 = x.data.reshape(-1, cin)
    out = x2 @ weight.data
    out += bias.data
    out = out.reshape(x.shape[:-1] + (cout,))

    def bwd(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _result("conv1x1", out, (x, weight, bias), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Dense layer on ``(B, N)`` inputs with weight ``(N, M)``."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or weight.shape[0] != x.shape[1]:
        raise ConfigError(f"linear: weight {weight.shape} does not fit input {x.shape}")
    if bias.shape != (weight.shape[1],):
        raise ConfigError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    out = x.data @ weight.data + bias.data

    def bwd(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _result("linear", out, (x, weight, bias), bwd)


def flatten(x: Tensor) -> Tensor:
    """``(B, ...) -> (B, N)``."""
    shape = x.shape
    out = x.data.reshape(shape[0], -1)
    return _result("flatten", out, (x,), lambda g: (g.reshape(shape),))


def channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice of the last axis, ``x[..., start:stop]``."""
    c = x.shape[-1]
    if not 0 <= start < stop <= c:
        raise ConfigError(f"channels: bad range [{start}, {stop}) for {c} channels")
    out = np.ascontiguousarray(x.data[..., start:stop])

    def bwd(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        gx[..., start:stop] = g
        return (gx,)

    return _result("channels", out, (x,), bwd)


def over_white(x: Tensor) -> Tensor:
    """Composite straight-alpha RGBA over a white background.

    Returns RGBA with ``rgb' = rgb * a + (1 - a)`` and the alpha channel set
    to 1, so the result carries no separate alpha information.
    """
    if x.shape[-1] != 4:
        raise ConfigError(f"over_white: expected 4 channels, got {x.shape}")
    rgb = x.data[..., :3]
    a = x.data[..., 3:4]
    out = np.empty_like(x.data)
    out[..., :3] = (rgb - 1.0) * a + 1.0
    out[..., 3] = 1.0

    def bwd(g):
        gx = np.empty_like(x.data)
        gx[..., :3] = g[..., :3] * a
        gx[..., 3] = np.sum(g[..., :3] * (rgb - 1.0), axis=-1)
        return (gx,)

    return _result("over_white", out, (x,), bwd)


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, DTYPE(0))
    return _result("relu", out, (x,), lambda g: (g * (out > 0),))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    d = x.data
    slope = np.where(d > 0, 1.0, alpha).astype(DTYPE)
    return _result("leaky_relu", d * slope, (x,), lambda g: (g * slope,))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    return _result("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, k: float) -> Tensor:
    k = DTYPE(k)
    return _result("scale", x.data * k, (x,), lambda g: (g * k,))


def shift(x: Tensor, c: float) -> Tensor:
    """``x + c`` for a Python scalar ``c``."""
    return _result("shift", x.data + DTYPE(c), (x,), lambda g: (g,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; the gradient is zero where clamping happened."""
    d = x.data
    inside = (d >= lo) & (d <= hi)
    out = np.clip(d, lo, hi).astype(DTYPE)
    return _result("clip", out, (x,), lambda g: (g * inside,))


def clamp01(x: Tensor) -> Tensor:
    return clip(x, 0.0, 1.0)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data.astype(np.float64)
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = out.astype(DTYPE)
    return _result("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def log(x: Tensor) -> Tensor:
    d = x.data
    if np.any(d <= 0):
        raise UsageError("log of a non-positive value; clip the input first")
    return _result("log", np.log(d), (x,), lambda g: (g / d,))


# ---------------------------------------------------------------------------
# reductions and losses


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=DTYPE)
    return _result("sum", out, (x,), lambda g: (np.full(shape, g, dtype=DTYPE),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=DTYPE)
    return _result("mean", out, (x,), lambda g: (np.full(shape, g / n, dtype=DTYPE),))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _same_shape("mse_loss", pred, target)
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=DTYPE)

    def bwd(g):
        gd = diff * DTYPE(2.0 * float(np.asarray(g).reshape(())) / n)
        return gd, -gd

    return _result("mse_loss", out, (pred, target), bwd)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor, tape: Tape | None = None, wrt: Sequence[Tensor] | None = None):
    """Propagate gradients from a scalar ``loss`` back through ``tape``.

    Every leaf tensor with ``requires_grad`` that the loss depends on gets
    its ``.grad`` set (leaves not reached get ``None``). If ``wrt`` is given
    the matching gradients are returned, zeros for unreachable leaves. The
    tape is cleared afterwards.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = _active_tape()
    if tape is None:
        raise UsageError("backward called without a tape")
    if loss._node is None and not loss.requires_grad:
        raise UsageError("loss was not produced on the tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf:
        leaves[id(loss)] = loss

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise AssertionError(f"{node.op}: gradient shape {gi.shape} != {inp.shape}")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi.astype(DTYPE, copy=False)
            if inp.is_leaf:
                leaves[key] = inp
    tape.clear()

    for key, leaf in leaves.items():
        leaf.grad = grads.get(key)
    if wrt is None:
        return None
    return [
        grads[id(t)] if id(t) in grads else np.zeros(t.shape, dtype=DTYPE) for t in wrt
    ]


_tuned = False


def tune_allocator() -> None:
    """Ask glibc to keep freed memory instead of returning it to the OS.

    Long rollouts allocate and release hundreds of megabytes per training
    step; without this every step pays for fresh page faults. No-op off glibc.
    """
    global _tuned
    if _tuned:
        return
    _tuned = True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 32 * 1024 * 1024)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass
