"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps an ``ndarray``. Every op builds a node that records its
parents and a backward rule; :func:`backward` walks the graph in reverse
topological order, visiting each node exactly once.

Training runs in float32, gradient verification in float64.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "no_grad",
    "tensor",
    "backward",
    "finite_diff_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "relu",
    "gelu",
    "sigmoid",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "softmax",
    "log_softmax",
    "layer_norm",
    "conv1d",
    "gather_rows",
    "normalize",
    "cosine_similarity",
    "mse",
    "bce_with_logits",
    "astype",
    "dropout",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op} (shape {data.shape})")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make("relu", np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make("gelu", out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


def astype(a: Tensor, dtype) -> Tensor:
    src = a.dtype
    return _make("astype", a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or ``rng`` is None (evaluation)."""
    if p <= 0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------- reductions / shape


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.asarray(out).size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return _make("mean", np.asarray(out, dtype=a.dtype), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("getitem", np.array(out, copy=True), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", out, tensors, bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _lift(a)
    b = _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), bw)


def gather_rows(table: Tensor, indices) -> Tensor:
    """``table[indices]`` for an integer index array (embedding lookup)."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise TypeError("gather_rows: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range for table with {table.shape[0]} rows")
    out = table.data[idx]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make("gather_rows", out, (table,), bw)


# ---------------------------------------------------------------- normalisation / activations


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), bw)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis to zero mean and unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make("layer_norm", xhat, (a,), bw)


def normalize(a: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """``x / sqrt(|x|^2 + eps^2)``; the zero vector maps to zero."""
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True) + eps * eps)
    y = x / n

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return _make("normalize", y, (a,), bw)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    return sum(mul(normalize(a, axis, eps), normalize(b, axis, eps)), axis=axis)


# ---------------------------------------------------------------- convolution


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int | tuple[int, int] = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 1-D convolution. x: (B, C_in, T), weight: (C_out, C_in/groups, K)."""
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-D input and weight, got {x.shape} and {weight.shape}")
    B, C_in, _ = x.shape
    C_out, C_g, K = weight.shape
    if C_in % groups or C_out % groups or C_in // groups != C_g:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with weight {weight.shape} for groups={groups}")
    pad_l, pad_r = (padding, padding) if isinstance(padding, int) else padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_l, pad_r))) if (pad_l or pad_r) else x.data
    T_pad = xp.shape[2]
    if T_pad < K:
        raise ShapeError(f"conv1d: padded length {T_pad} shorter than kernel {K}")
    T_out = (T_pad - K) // stride + 1
    G, Cog = groups, C_out // groups

    win = sliding_window_view(xp, K, axis=2)[:, :, : (T_out - 1) * stride + 1 : stride, :]
    # (B, G, Cg, T, K) -> (G, B*T, Cg*K)
    cols = win.reshape(B, G, C_g, T_out, K).transpose(1, 0, 3, 2, 4).reshape(G, B * T_out, C_g * K)
    wmat = weight.data.reshape(G, Cog, C_g * K).transpose(0, 2, 1)
    out = cols @ wmat  # (G, B*T, Cog)
    out = out.reshape(G, B, T_out, Cog).transpose(1, 0, 3, 2).reshape(B, C_out, T_out)
    if bias is not None:
        out = out + bias.data[None, :, None]

    def bw(g):
        go = g.reshape(B, G, Cog, T_out).transpose(1, 0, 3, 2).reshape(G, B * T_out, Cog)
        gw = (np.swapaxes(cols, 1, 2) @ go).transpose(0, 2, 1).reshape(weight.shape)
        bias_grad = [g.sum(axis=(0, 2))] if bias is not None else []
        if not x.requires_grad:
            return (None, gw, *bias_grad)
        # (G, Cog, K*Cg) with kernel taps outermost: each tap scatters contiguous channel blocks
        wk = weight.data.reshape(G, Cog, C_g, K).transpose(0, 1, 3, 2).reshape(G, Cog, K * C_g)
        y = (go @ wk).reshape(G, B, T_out, K, C_g)
        gxt = np.zeros((G, B, T_pad, C_g), dtype=xp.dtype)
        span = (T_out - 1) * stride + 1
        for k in range(K):
            gxt[:, :, k : k + span : stride, :] += y[:, :, :, k, :]
        gxp = gxt.transpose(1, 0, 3, 2).reshape(B, C_in, T_pad)
        gx = gxp[:, :, pad_l : T_pad - pad_r]
        return (gx, gw, *bias_grad)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make("conv1d", out, parents, bw)


# ---------------------------------------------------------------- losses


def mse(a: Tensor, b) -> Tensor:
    """Mean squared error over all elements."""
    b = _lift(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    n = d.size

    def bw(g):
        gd = 2.0 * g * d / n
        return gd, -gd

    return _make("mse", np.asarray((d * d).mean(), dtype=a.dtype), (a, b), bw)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: shapes {logits.shape} and {t.shape} differ")
    x = logits.data
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        return (g * (_stable_sigmoid(x) - t) / x.size,)

    return _make("bce_with_logits", np.asarray(loss.mean(), dtype=x.dtype), (logits,), bw)


# ---------------------------------------------------------------- backward pass


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with requires_grad."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.astype(node.dtype) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    h: float | None = None,
    max_coords: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between the analytic gradient of ``f`` and central differences.

    ``f`` maps a float64 tensor to a scalar tensor. Tensors with more than
    ``max_coords`` entries are checked on a random coordinate sample of that size.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)`` where the
    floor is ``1e-6`` times the largest gradient magnitude seen (or 1e-12).
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x0) if x.grad is None else x.grad.astype(np.float64)

    flat = x0.reshape(-1)
    n = flat.size
    if n > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(n, size=max_coords, replace=False))
    else:
        coords = np.arange(n)
    scale = max(1.0, float(np.abs(flat).max(initial=0.0)))
    step = h if h is not None else 1e-6 * scale

    numeric = np.empty(len(coords))
    with no_grad():
        for i, c in enumerate(coords):
            xp = flat.copy()
            xm = flat.copy()
            xp[c] += step
            xm[c] -= step
            fp = float(f(Tensor(xp.reshape(x0.shape))).data)
            fm = float(f(Tensor(xm.reshape(x0.shape))).data)
            numeric[i] = (fp - fm) / (2 * step)
    a = analytic.reshape(-1)[coords]
    mag = max(float(np.abs(a).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    if mag == 0.0:
        return 0.0
    floor = max(1e-6 * mag, 1e-12)
    rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    return float(rel.max())
