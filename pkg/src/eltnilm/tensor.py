"""Minimal dense tensors with reverse-mode gradients.

Every tensor wraps a float64 numpy array. Operations on tensors that require
gradients are appended to a per-thread :class:`Tape`; :func:`backward` replays
the tape in reverse execution order and then clears it.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> backward((x * x).sum())
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterator, Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr
from threadpoolctl import threadpool_limits

from eltnilm.errors import ConfigError, DimensionError, NumericError, UsageError

LAYER_NORM_EPS = 1e-5

_state = threading.local()


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.entries = []

    def record(self, op: str, out: "Tensor", inputs: tuple, vjp: Callable) -> None:
        self.entries.append((op, out, inputs, vjp))

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference, validation)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class MultiplyCounter:
    """Accumulates scalar multiplications performed by matrix products."""

    def __init__(self):
        self.value = 0


@contextlib.contextmanager
def count_multiplies() -> Iterator[MultiplyCounter]:
    counter = MultiplyCounter()
    stack = getattr(_state, "counters", None)
    if stack is None:
        stack = _state.counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def _add_multiplies(n: int) -> None:
    for counter in getattr(_state, "counters", ()):
        counter.value += n


_blas_limiter = None


def set_deterministic(flag: bool) -> None:
    """Pin BLAS to one thread so reductions run in a fixed order."""
    global _blas_limiter
    if flag and _blas_limiter is None:
        _blas_limiter = threadpool_limits(limits=1, user_api="blas")
    elif not flag and _blas_limiter is not None:
        _blas_limiter.restore_original_limits()
        _blas_limiter = None


def is_deterministic() -> bool:
    return _blas_limiter is not None


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{what} produced non-finite values")


class Tensor:
    """Dense float64 array that can take part in the gradient tape.

    Leaf tensors created with ``requires_grad=True`` start with a zero
    gradient buffer; gradients accumulate into it until :meth:`zero_grad`.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operators
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
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, out: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    _check_finite(out, op)
    requires = grad_enabled() and any(t.requires_grad for t in inputs)
    t = Tensor._wrap(out, requires)
    if requires:
        current_tape().record(op, t, inputs, vjp)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor, on_visit: Optional[Callable[[str], None]] = None) -> None:
    """Populate ``.grad`` of every tensor reachable from a scalar ``loss``.

    The tape of the calling thread is replayed from the last recorded
    operation to the first and cleared afterwards. ``on_visit`` receives the
    name of each replayed operation.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    if not loss.requires_grad:
        tape.clear()
        return
    loss.grad = np.ones_like(loss.data)
    try:
        for op, out, inputs, vjp in reversed(tape.entries):
            if on_visit is not None:
                on_visit(op)
            if out.grad is None:
                continue
            for inp, g in zip(inputs, vjp(out.grad)):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.shape:
                    g = _unbroadcast(g, inp.shape)
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=np.float64)
                else:
                    inp.grad += g
    finally:
        tape.clear()


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _add_multiplies(out.size * a.shape[-1])

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), vjp)


# shape manipulation


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(
        "transpose",
        np.swapaxes(x.data, -1, -2),
        (x,),
        lambda g: (np.swapaxes(g, -1, -2),),
    )


def reshape(x: Tensor, shape) -> Tensor:
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def index(x: Tensor, idx) -> Tensor:
    fancy = _is_fancy(idx)

    def vjp(g):
        out = np.zeros_like(x.data)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] += g
        return (out,)

    return _make("index", np.array(x.data[idx]), (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def pad(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis."""
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    n = x.shape[axis]

    def vjp(g):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(before, before + n)
        return (g[tuple(sl)],)

    return _make("pad", np.pad(x.data, widths), (x,), vjp)


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries along ``axis``; repeated indices accumulate gradient."""
    indices = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(x.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _make("gather", np.take(x.data, indices, axis=axis), (x,), vjp)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# neural network primitives

_SOFTMAX_AXES = {"row": -1, "column": -2}


def softmax_axis(x: Tensor, axis: str = "row", mask=None) -> Tensor:
    """Softmax of each matrix along its rows (``"row"``) or columns.

    Row softmax normalises over the last axis, column softmax over the
    second-to-last. ``mask`` is a boolean array broadcastable to ``x``;
    entries where it is False get probability exactly 0.
    """
    try:
        ax = _SOFTMAX_AXES[axis]
    except KeyError:
        raise ValueError(f"axis must be 'row' or 'column', got {axis!r}") from None
    if x.ndim < 2:
        raise DimensionError(f"softmax_axis needs rank >= 2, got shape {x.shape}")
    if x.shape[ax] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = z.max(axis=ax, keepdims=True)
    if mask is not None and np.isneginf(zmax).any():
        raise DimensionError("softmax slice with every entry masked")
    e = np.exp(z - zmax)
    s = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _make("softmax", s, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = ndtr(x.data)

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return _make("gelu", x.data * cdf, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs at least 2 features")
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layer_norm affine parameters must have shape ({d},)")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layer_norm", xhat * gain.data + shift.data, (x, gain, shift), vjp)


def conv1d(x: Tensor, filters: Tensor, bias: Tensor) -> Tensor:
    """Cross-correlation along the length axis with "same" zero padding.

    ``x`` is ``(l, c_in)`` or ``(batch, l, c_in)``, ``filters`` is
    ``(k, c_in, c_out)`` with odd ``k``, ``bias`` is ``(c_out,)``.
    """
    k, c_in, c_out = filters.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd, got {k}")
    if x.ndim < 2 or x.shape[-1] != c_in:
        raise DimensionError(f"conv1d input {x.shape} does not match {c_in} input channels")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv1d bias must have shape ({c_out},)")
    half = k // 2
    length = x.shape[-2]
    widths = [(0, 0)] * x.ndim
    widths[-2] = (half, half)
    padded = np.pad(x.data, widths)
    # (..., l, c_in, k) -> (..., l, k * c_in)
    cols = np.swapaxes(sliding_window_view(padded, k, axis=-2), -1, -2)
    cols = cols.reshape(*x.shape[:-2], length, k * c_in)
    w = filters.data.reshape(k * c_in, c_out)
    out = cols @ w + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gw = (cols.reshape(-1, k * c_in).T @ g.reshape(-1, c_out)).reshape(k, c_in, c_out)
        gx = None
        if x.requires_grad:
            gcols = (g @ w.T).reshape(*g.shape[:-1], k, c_in)
            gpad = np.zeros_like(padded)
            for j in range(k):
                gpad[..., j : j + length, :] += gcols[..., j, :]
            gx = gpad[..., half : half + length, :]
        return gx, gw, g.sum(axis=lead)

    return _make("conv1d", out, (x, filters, bias), vjp)


def lp_pool2(x: Tensor, kernel: int, stride: int) -> Tensor:
    """L2 pooling over the length axis (second to last).

    Output length is ``ceil(l / stride)``; a trailing window that runs past
    the end pools only the elements that exist.
    """
    if kernel < 1 or stride < 1:
        raise ConfigError("pool kernel and stride must be >= 1")
    if x.ndim < 2:
        raise DimensionError(f"lp_pool2 needs shape (..., l, d), got {x.shape}")
    length = x.shape[-2]
    n_out = -(-length // stride)
    span = (n_out - 1) * stride + 1
    need = span - 1 + kernel
    widths = [(0, 0)] * x.ndim
    widths[-2] = (0, max(0, need - length))
    padded = np.pad(x.data, widths)
    sq = np.zeros(x.shape[:-2] + (n_out, x.shape[-1]))
    for j in range(kernel):
        part = padded[..., j : j + span : stride, :]
        sq += part * part
    out = np.sqrt(sq)

    def vjp(g):
        scale = np.divide(g, out, out=np.zeros_like(out), where=out > 0)
        gpad = np.zeros_like(padded)
        for j in range(kernel):
            gpad[..., j : j + span : stride, :] += padded[..., j : j + span : stride, :] * scale
        return (gpad[..., :length, :],)

    return _make("lp_pool2", out, (x,), vjp)


# gradient checking


def _value(f, params) -> float:
    with no_grad():
        return float(np.asarray(f(params).data).reshape(-1)[0])


def gradient_errors(f: Callable, params: Mapping[str, Tensor], step: float = 1e-5) -> dict:
    """Per-parameter worst relative error between tape and central-difference gradients.

    The relative error of one scalar is
    ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    if step <= 0:
        raise UsageError("finite-difference step must be positive")
    first, second = _value(f, params), _value(f, params)
    if first != second:
        raise UsageError(f"function is not deterministic ({first!r} != {second!r})")
    items = list(params.items())
    for _, p in items:
        p.zero_grad()
    current_tape().clear()
    backward(f(params))
    errors = {}
    for name, p in items:
        analytic = p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise UsageError(f"parameter {name} is not contiguous")
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = _value(f, params)
            flat[i] = orig - step
            down = _value(f, params)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
            worst = max(worst, err)
        errors[name] = worst
    return errors


def finite_diff_check(f: Callable, params: Mapping[str, Tensor], step: float = 1e-5) -> float:
    """Max relative gradient error over every scalar of every parameter."""
    errors = gradient_errors(f, params, step)
    return max(errors.values(), default=0.0)
