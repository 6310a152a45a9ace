"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient the output keeps a reference to its parents and a closure that maps
the upstream gradient to per-parent gradients. :func:`backward` linearises the
graph into a :class:`Tape` (topological order) and walks it once in reverse.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LEAKY_SLOPE = 0.2


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class TapeError(RuntimeError):
    """Backward was requested on a value that is not on any tape."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested on fewer than two elements per channel."""


class Tensor:
    """An n-dimensional float array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = ""

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
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    # python scalars / arrays adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _node(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- tape


@dataclass
class Tape:
    """Topologically ordered record of the operations that produced a value."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def backward(self, output: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if output.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise TapeError("output does not depend on any tensor that requires grad")
    Tape.record(output).backward(output)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None), "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data / b.data

    def fn(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _node(out, (a, b), fn, "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    return _node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def leaky_relu(a: Tensor, alpha: float = LEAKY_SLOPE) -> Tensor:
    pos = a.data >= 0
    slope = np.where(pos, 1, alpha).astype(a.dtype)
    return _node(a.data * slope, (a,), lambda g: (g * slope,), "leaky_relu")


def activation(a: Tensor, kind: str, alpha: float = LEAKY_SLOPE) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(a, alpha)
    if kind == "tanh":
        return tanh(a)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- reductions / shape


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    kept = a.data.sum(axis=axes, keepdims=True).shape

    def fn(g):
        return (np.broadcast_to(g.reshape(kept), a.shape).copy(),)

    return _node(np.asarray(out), (a,), fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def l2norm(a: Tensor) -> Tensor:
    """Euclidean norm of all entries; the gradient at the origin is taken as zero."""
    n = np.sqrt(np.sum(a.data * a.data))

    def fn(g):
        if n == 0:
            return (np.zeros_like(a.data),)
        return (g * a.data / n,)

    return _node(np.asarray(n, dtype=a.dtype), (a,), fn, "l2norm")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not conform")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out as (in, out)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is None:
        return matmul(x, weight)
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data

    def fn(g):
        return (g @ wd.T if x.requires_grad else None,
                xd.T @ g if weight.requires_grad else None,
                g.sum(axis=0) if bias.requires_grad else None)

    return _node(out, (x, weight, bias), fn, "linear")


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"conv output size ({size}+2*{padding}-{k})/{stride}+1 is not integral")
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B, C, H, W) input with (F, C, k, k) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and kernel")
    B, C, H, W = x.shape
    F, Ck, k, k2 = kernel.shape
    if Ck != C or k != k2:
        raise DimensionError(f"conv2d: input {x.shape} vs kernel {kernel.shape}")
    if k % 2 == 0:
        raise DimensionError("conv2d kernel size must be odd")
    Ho = _conv_out(H, k, stride, padding)
    Wo = _conv_out(W, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    # cols: (C, k, k, B, Ho, Wo)
    cols = np.empty((C, k, k, B, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + hs:stride, j:j + ws:stride].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(C * k * k, B * Ho * Wo)
    w2 = kernel.data.reshape(F, C * k * k)
    out = (w2 @ cols2).reshape(F, B, Ho, Wo).transpose(1, 0, 2, 3)
    if bias is not None:
        if bias.shape != (F,):
            raise DimensionError(f"conv2d: bias {bias.shape} vs {F} filters")
        out = out + bias.data.reshape(1, F, 1, 1)
    out = np.ascontiguousarray(out)

    def fn(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(F, B * Ho * Wo)
        gw = (g2 @ cols2.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(C, k, k, B, Ho, Wo)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, fn, "conv2d")


def upsample2x_nearest(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    B, C, H, W = x.shape

    def fn(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _node(out, (x,), fn, "upsample2x")


def avg_pool2x(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError("avg_pool2x needs even spatial dims")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def fn(g):
        return (0.25 * g.repeat(2, axis=2).repeat(2, axis=3),)

    return _node(out, (x,), fn, "avg_pool2x")


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------- softmax family


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def fn(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, (logits,), fn, "log_softmax")


def softmax_temp(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of ``logits / temperature``, max-shifted for stability."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = as_tensor(logits)
    scaled = logits.data / temperature
    e = np.exp(scaled - scaled.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / temperature,)

    return _node(p, (logits,), fn, "softmax_temp")


# ---------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    """Affine parameters and running moments of one batch-norm layer.

    ``captured`` holds the (mean, variance) tensors of the latest train-mode
    batch; they stay attached to the graph so losses can differentiate
    through them.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    captured: Optional[tuple[Tensor, Tensor]] = None

    @classmethod
    def create(cls, channels: int, dtype=DEFAULT_DTYPE) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_moments(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel mean and biased variance over every axis except 1."""
    axes = (0,) + tuple(range(2, x.ndim))
    count = x.size // x.shape[1]
    if count < 2:
        raise DegenerateBatchError(
            f"batch statistics need at least 2 values per channel, got {count}")
    shape = [1] * x.ndim
    shape[1] = x.shape[1]
    mu = mean(x, axes)
    centered = x - reshape(mu, shape)
    var = mean(centered * centered, axes)
    return mu, var


def batchnorm_forward(x: Tensor, state: BatchNormState, mode: str = "train"):
    """Normalise ``x`` channel-wise and apply the affine transform.

    Modes:
        ``train``: normalise by batch moments, store them in ``state.captured``
        and update the running moments.
        ``eval``: normalise by the running moments; nothing is captured.
        ``capture``: normalise by the running moments (frozen behaviour) but
        still measure the batch moments. The state is left untouched, so a
        frozen network can be shared between threads.
        ``batch``: normalise by batch moments without touching the state.

    Returns:
        ``(output, moments)`` where ``moments`` is ``(mean, var)`` or ``None``.
    """
    if x.shape[1] != state.channels:
        raise DimensionError(f"batchnorm: {x.shape[1]} channels vs state {state.channels}")
    shape = [1] * x.ndim
    shape[1] = x.shape[1]
    moments = None
    if mode in ("train", "batch"):
        mu, var = batch_moments(x)
        if mode == "train":
            m = state.momentum
            state.running_mean = (m * state.running_mean + (1 - m) * mu.data).astype(state.running_mean.dtype)
            state.running_var = (m * state.running_var + (1 - m) * var.data).astype(state.running_var.dtype)
            state.captured = (mu, var)
        moments = (mu, var)
        xhat = (x - reshape(mu, shape)) / sqrt(reshape(var, shape) + state.eps)
    elif mode in ("eval", "capture"):
        if mode == "capture":
            moments = batch_moments(x)
        rm = state.running_mean.astype(x.dtype).reshape(shape)
        inv = (1.0 / np.sqrt(state.running_var.astype(x.dtype) + state.eps)).reshape(shape)
        xhat = (x - rm) * inv.astype(x.dtype)
    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    out = xhat * reshape(state.gamma, shape) + reshape(state.beta, shape)
    return out, moments


def one_hot(labels, num_classes: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out
