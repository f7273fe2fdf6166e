"""Minimal dense reverse-mode automatic differentiation on numpy float64 arrays.

Operations are recorded onto the active :class:`Tape` only when a tape is
entered and at least one operand requires a gradient, so plain inference
runs without any bookkeeping::

    with Tape() as tape:
        loss = cross_entropy(model(x), y)
    backward(loss)

Only the layer set needed by the network is provided: 2-D convolution,
fully connected layers, adaptive average pooling, fused batch norm + ReLU,
softmax, a clamped logarithm, the spiking step with a rectangular surrogate
derivative and the fused leaky-integrate potential update.
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

PARAM_GROUPS = ("shared_conv", "attention", "spatial_only", "temporal_fc")

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "seen_active_tape", default=None
)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the tape: detached loss, double backward, and so on."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf tensor with a unique dotted name and a weight-copy group."""

    __slots__ = ("name", "_group")

    def __init__(self, data, name: str, group: str, requires_grad: bool = True):
        if group not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group {group!r}; expected one of {PARAM_GROUPS}")
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=requires_grad)
        self.name = name
        self._group = group

    @property
    def group(self) -> str:
        return self._group

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, group={self.group!r}, shape={self.shape})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """Records operations in execution order; replays their backward closures in reverse."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by backward(); run a fresh forward pass")
        out.tape = self
        self._nodes.append((out, parents, backward_fn))

    def run_backward(self, root: Tensor) -> None:
        if self._consumed:
            raise TapeError("backward() called twice on the same tape without a new forward pass")
        root.grad = np.ones_like(root.data)
        for out, parents, fn in reversed(self._nodes):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for parent, g in zip(parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=DTYPE, copy=True).reshape(parent.shape)
                else:
                    parent.grad += g
        for out, _, _ in self._nodes:
            out.grad = None
        self._nodes.clear()
        self._consumed = True


def recording() -> "Tape | None":
    """The tape operations are currently recorded onto, if any."""
    return _active_tape.get()


@contextmanager
def no_grad():
    """Suspend recording; operations inside produce untracked tensors."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked leaf that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise TapeError("loss is detached: it was not produced under an active Tape")
    loss.tape.run_backward(loss)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = _active_tape.get()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    tape.record(out, tuple(parents), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw)


def clamped_log(a: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(a, floor)); the gradient is zero where the clamp is active."""
    clipped = np.maximum(a.data, floor)
    live = a.data > floor

    def bw(g):
        return (np.where(live, g / clipped, 0.0),)

    return _make(np.log(clipped), (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# structural ------------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return _make(a.data[index], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def tensor_sum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.data.size
        return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n),))
    n = a.shape[axis]

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape),)

    return _make(a.data.mean(axis=axis), (a,), bw)


def stack_mean(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of equally shaped tensors."""
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        acc += t.data

    def bw(g):
        share = g / n
        return tuple(share if t.requires_grad else None for t in tensors)

    return _make(acc / n, tensors, bw)


# layers ----------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W.T + b`` for ``x`` of shape (N, in) and ``W`` of shape (out, in)."""
    x = as_tensor(x)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out += bias.data

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(out, parents, bw)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """Columns of shape (C*k*k, N*Ho*Wo), one kernel offset per row block."""
    n, c, h, w = x.shape
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((c, k, k, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo), ho, wo


def _col2im(gcols: np.ndarray, shape, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    gcols = gcols.reshape(c, k, k, n, ho, wo)
    gpad = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            gpad[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
    return gpad[:, :, pad : pad + h, pad : pad + w]


def _channels_first(a: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C, N*H*W)."""
    n, c = a.shape[:2]
    if n == 1:
        return a.reshape(c, -1)
    return a.transpose(1, 0, 2, 3).reshape(c, -1)


def _batch_first(a: np.ndarray, n: int, ho: int, wo: int) -> np.ndarray:
    """(C, N*H*W) -> contiguous (N, C, H, W)."""
    c = a.shape[0]
    if n == 1:
        return a.reshape(1, c, ho, wo)
    return np.ascontiguousarray(a.reshape(c, n, ho, wo).transpose(1, 0, 2, 3))


def conv2d(x, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int | str = "same") -> Tensor:
    """Cross-correlation of an (N, C, H, W) input with a (Cout, C, k, k) kernel."""
    x = as_tensor(x)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    cout, cin, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got weight {weight.shape}")
    pad = k // 2 if padding == "same" else int(padding)
    n, _, h, w = x.shape
    if k == 1 and pad == 0 and stride == 1:
        cols, ho, wo = _channels_first(x.data), h, w
    else:
        cols, ho, wo = _im2col(x.data, k, stride, pad)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]

    def bw(g):
        gmat = _channels_first(g)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ gmat
            if k == 1 and pad == 0 and stride == 1:
                gx = _batch_first(gcols, n, h, w)
            else:
                gx = _col2im(gcols, x.shape, k, stride, pad, ho, wo)
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(_batch_first(out, n, ho, wo), parents, bw)


def adaptive_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, (N, C, H, W) -> (N, C, 1, 1)."""
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _make(out, (x,), lambda g: (np.broadcast_to(g / hw, x.shape),))


class BatchNormStats:
    """Running statistics buffer for one batch-norm layer (not trainable)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batchnorm_relu(x: Tensor, scale: Tensor, shift: Tensor, stats: BatchNormStats, training: bool) -> Tensor:
    """Batch normalisation over (N, H, W) per channel followed by ReLU.

    In training mode the batch statistics normalise the input and the running
    statistics are updated with ``momentum``; in eval mode the running
    statistics are used as constants.
    """
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"batchnorm_relu: input {x.shape} incompatible with scale {scale.shape}")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.data.size // c
        unbiased = var * count / (count - 1) if count > 1 else var
        m = stats.momentum
        stats.running_mean = (1 - m) * stats.running_mean + m * mu
        stats.running_var = (1 - m) * stats.running_var + m * unbiased
    else:
        mu, var = stats.running_mean, stats.running_var
    inv_std = 1.0 / np.sqrt(var + stats.eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    pre = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)
    mask = pre > 0
    out = np.where(mask, pre, 0.0)

    def bw(g):
        gpre = g * mask
        gscale = (gpre * xhat).sum(axis=axes) if scale.requires_grad else None
        gshift = gpre.sum(axis=axes) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = gpre * scale.data.reshape(bshape)
            if training:
                gx = inv_std.reshape(bshape) * (
                    gxhat
                    - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, gscale, gshift

    return _make(out, (x, scale, shift), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw)


# spiking ---------------------------------------------------------------------


def heaviside(x: np.ndarray) -> np.ndarray:
    return (x >= 0).astype(DTYPE)


def rectangle(x: np.ndarray, width: float) -> np.ndarray:
    """Rectangular surrogate derivative (1/a) * 1[|x| < a/2]."""
    return np.where(np.abs(x) < width / 2, 1.0 / width, 0.0)


def surrogate_step(x: Tensor, width: float = 1.0, threshold: float = 0.0) -> Tensor:
    """Exact Heaviside forward h(x - threshold) with h(0) = 1; rectangular surrogate backward."""
    if width <= 0:
        raise ValueError(f"surrogate width must be positive, got {width}")
    # x - threshold >= 0 and x >= threshold agree for finite floats
    out = (x.data >= threshold).astype(DTYPE)
    return _make(out, (x,), lambda g: (g * rectangle(x.data - threshold, width),))


def lif_potential(v_prev: Tensor, p_prev: Tensor, x: Tensor, alpha: float) -> Tensor:
    """Fused ``alpha * v_prev * (1 - p_prev) + x``."""
    keep = 1.0 - p_prev.data
    out = alpha * v_prev.data
    out *= keep
    out += x.data

    def bw(g):
        return (
            g * alpha * keep if v_prev.requires_grad else None,
            -g * alpha * v_prev.data if p_prev.requires_grad else None,
            g if x.requires_grad else None,
        )

    return _make(out, (v_prev, p_prev, x), bw)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
