"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every op builds its result eagerly and, when any input requires a gradient,
attaches a :class:`Node` holding the inputs and a closure mapping the output
gradient to input gradients.  :func:`backward` topologically sorts the
recorded nodes from a scalar root and runs the closures once each.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class KinkLog(list):
    """Branch patterns in op order, plus the smallest distance of any ReLU input to its kink."""

    margin = float("inf")


@contextlib.contextmanager
def track_kinks():
    """Collect the branch pattern (ReLU masks, max/argmax choices) of every op run inside the block.

    Two evaluations with equal patterns lie on the same smooth piece of a
    piecewise-smooth function; finite differences are only valid there.
    """
    log = KinkLog()
    prev = getattr(_state, "kinks", None)
    _state.kinks = log
    try:
        yield log
    finally:
        _state.kinks = prev


def _note_kink(pattern: np.ndarray, near=None):
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(pattern)
        if near is not None and near.size:
            log.margin = min(log.margin, float(np.abs(near).min()))


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- basics ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- operators ------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def var(self, axis=None, keepdims=False):
        return reduce("variance", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _result(data: np.ndarray, op: str, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


# -- graph / backward ----------------------------------------------------

class Graph:
    """Topologically ordered record of the ops reachable from a root tensor."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; deep nets overflow Python recursion
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                self.nodes.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for inp in reversed(t.node.inputs):
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf.

    Calling twice without clearing grads accumulates, as with any leaf update.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = t.node.backward_fn(g)
        for inp, ig in zip(t.node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig


# -- broadcasting helpers ------------------------------------------------

def broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}") from None


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    # no epsilon here: callers own their guards
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, "div", (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _result(a.data ** p, "pow", (a,), lambda g: (g * p * a.data ** (p - 1),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    _note_kink(mask, a.data)
    return _result(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0 (a subgradient of |x|-like maps)."""
    a = as_tensor(a)
    out = np.sqrt(a.data)
    _note_kink(out > 0)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _result(out, "sqrt", (a,), bw)


_UNARY = {"sigmoid": sigmoid, "relu": relu, "exp": exp, "log": log, "sqrt": sqrt, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, div (binary) or sigmoid, relu, exp, log, sqrt, neg (unary)."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# -- reductions -----------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _expand(g: np.ndarray, in_shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, in_shape)


def reduce(kind: str, a, axis=None, keepdims: bool = False) -> Tensor:
    """Reduce over ``axis`` with one of sum, mean, variance (population), max."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    if count == 0:
        raise ShapeError(f"empty reduction over axes {axes} of shape {a.shape}")
    x = a.data
    if kind == "sum":
        out = x.sum(axis=axes, keepdims=keepdims)
        bw = lambda g: (_expand(g, a.shape, axes, keepdims).copy(),)
    elif kind == "mean":
        out = x.mean(axis=axes, keepdims=keepdims)
        bw = lambda g: (_expand(g, a.shape, axes, keepdims) / count,)
    elif kind == "variance":
        mu = x.mean(axis=axes, keepdims=True)
        centered = x - mu
        out = (centered ** 2).mean(axis=axes, keepdims=keepdims)
        bw = lambda g: (_expand(g, a.shape, axes, keepdims) * (2.0 / count) * centered,)
    elif kind == "max":
        out = x.max(axis=axes, keepdims=keepdims)
        full = _expand(out, a.shape, axes, keepdims)
        mask = (x == full)
        _note_kink(mask)
        # ties share the gradient evenly
        share = mask / mask.sum(axis=axes, keepdims=True)
        bw = lambda g: (_expand(g, a.shape, axes, keepdims) * share,)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return _result(np.asarray(out, dtype=DTYPE), kind, (a,), bw)


def batch_norm(x, gamma, beta, axes=(0, 2, 3), eps: float = 1e-5):
    """Fused ``(x - mean) / sqrt(var + eps) * gamma + beta`` with batch statistics over ``axes``.

    Returns (out, mean, var); the statistics come back as plain arrays for running averages.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = _norm_axes(axes, x.ndim)
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    if count == 0:
        raise ShapeError(f"empty batch-norm reduction over axes {axes} of shape {x.shape}")
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=axes, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = centered / std
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = (gh - gh.mean(axis=axes, keepdims=True)
                  - xhat * (gh * xhat).mean(axis=axes, keepdims=True)) / std
        return gx, unbroadcast(g * xhat, gamma.shape), unbroadcast(g, beta.shape)

    return _result(out, "batch_norm", (x, gamma, beta), bw), mu, var


# -- shape ops ------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        if _is_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result(np.array(a.data[idx], dtype=DTYPE), "getitem", (a,), bw)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _result(out, "concat", tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _result(a.data @ b.data, "matmul", (a, b), bw)


# -- convolution / pooling -----------------------------------------------

def conv_out_extent(n: int, k: int, stride: int, padding: int, allow_floor: bool = False) -> int:
    span = n + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded extent {n + 2 * padding}")
    if span % stride and not allow_floor:
        raise ShapeError(
            f"non-integer output extent: ({n} + 2*{padding} - {k})/{stride} + 1")
    return span // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1: stride, : stride * (wo - 1) + 1: stride]


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Zero-pad the last two axes (faster than np.pad for this fixed case)."""
    if not ph and not pw:
        return x
    out = np.zeros(x.shape[:-2] + (x.shape[-2] + 2 * ph, x.shape[-1] + 2 * pw), dtype=x.dtype)
    out[..., ph: ph + x.shape[-2], pw: pw + x.shape[-1]] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[B, C, Hp, Wp] -> [C*kh*kw, B*ho*wo], one strided slice copy per kernel offset."""
    B, C = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((C, kh, kw, B, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i: i + stride * (ho - 1) + 1: stride, j: j + stride * (wo - 1) + 1: stride]
    return cols.reshape(C * kh * kw, B * ho * wo)


def conv2d(x, k, stride: int = 1, padding: int = 0, bias=None, allow_floor: bool = False) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is [B, C_in, H, W] or [C_in, H, W]; ``k`` is [C_out, C_in, kh, kw].
    """
    x, k = as_tensor(x), as_tensor(k)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d expects [B,C,H,W] input and 4-D kernel, got {x.shape}, {k.shape}")
    B, C, H, W = xd.shape
    co, ci, kh, kw = k.shape
    if ci != C:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {k.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    ho = conv_out_extent(H, kh, stride, padding, allow_floor)
    wo = conv_out_extent(W, kw, stride, padding, allow_floor)
    xp = _pad_hw(xd, padding, padding)
    # cols: [C*kh*kw, B*ho*wo]; this ordering keeps the copy and the matmul cache friendly
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    kmat = k.data.reshape(co, -1)
    out = (kmat @ cols).reshape(co, B, ho, wo).transpose(1, 0, 2, 3)
    inputs: tuple = (x, k)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, co, 1, 1)
        inputs = (x, k, bias)
    out = np.ascontiguousarray(out)
    if unbatched:
        out = out[0]

    def bw(g):
        g4 = g[None] if unbatched else g
        g2 = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(co, -1)
        gk = (g2 @ cols.T).reshape(k.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and padding <= min(kh, kw) - 1:
                gx = _conv_input_grad_stride1(g4, k.data, padding, H, W)
            else:
                dcols = (kmat.T @ g2).reshape(C, kh, kw, B, ho, wo)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i: i + stride * (ho - 1) + 1: stride,
                            j: j + stride * (wo - 1) + 1: stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
                gx = dxp[:, :, padding: padding + H, padding: padding + W] if padding else dxp
            if unbatched:
                gx = gx[0]
        if bias is not None:
            return gx, gk, g4.sum(axis=(0, 2, 3))
        return gx, gk

    return _result(out, "conv2d", inputs, bw)


def _conv_input_grad_stride1(g, kdata, padding, H, W):
    # stride-1 input gradient = full correlation of g with the flipped, channel-swapped kernel
    co, ci, kh, kw = kdata.shape
    ph, pw = kh - 1 - padding, kw - 1 - padding
    B = g.shape[0]
    cols = _im2col(_pad_hw(g, ph, pw), kh, kw, 1, H, W)
    kflip = kdata[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(ci, -1)
    return np.ascontiguousarray((kflip @ cols).reshape(ci, B, H, W).transpose(1, 0, 2, 3))


def maxpool2d(x, size: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Max pooling over [B, C, H, W] with -inf padding and floor output extents."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    ho = conv_out_extent(H, size, stride, padding, allow_floor=True)
    wo = conv_out_extent(W, size, stride, padding, allow_floor=True)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = _windows(xp, size, size, stride, ho, wo).reshape(B, C, ho, wo, size * size)
    arg = win.argmax(axis=-1)
    _note_kink(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dxp = np.zeros_like(xp)
        di, dj = np.divmod(arg, size)
        bi, ci, oi, oj = np.indices(arg.shape)
        np.add.at(dxp, (bi, ci, oi * stride + di, oj * stride + dj), g)
        return (dxp[:, :, padding: padding + H, padding: padding + W],)

    return _result(out, "maxpool2d", (x,), bw)


# -- serialization ----------------------------------------------------------

MAGIC = b"PXT1"


def tensor_to_bytes(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes) -> Tensor:
    if buf[:4] != MAGIC:
        raise ValueError(f"bad tensor magic {buf[:4]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{rank}Q", buf, 8)
    offset = 8 + 8 * rank
    count = int(np.prod(shape)) if rank else 1
    payload = buf[offset:]
    if len(payload) != 8 * count:
        raise ValueError(f"tensor payload holds {len(payload)} bytes, expected {8 * count}")
    return Tensor(np.frombuffer(payload, dtype="<f8").astype(DTYPE).reshape(shape))


def save_tensor(path, t):
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
