"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every primitive below computes its forward value with numpy and, when a
:class:`Tape` is active and at least one input requires a gradient, appends
an entry holding the vector-Jacobian product closure. ``backward`` then
replays the tape in strict reverse recording order.

Spatial tensors use the channels-last layout ``(..., H, W, C)``; a leading
batch axis is optional everywhere.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_node_ids = itertools.count()
_local = threading.local()


class Tensor:
    """Dense float64 array that can take part in a recorded graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.tape: Optional[Tape] = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def backward(self) -> dict:
        if self.tape is None:
            raise RuntimeError("tensor was not produced on a tape")
        return backward(self.tape, self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class Parameter(Tensor):
    """A named leaf tensor owned by a model."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; nested tapes are allowed and the innermost one
    records. A tape is bound to the thread that entered it.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, loss: Tensor) -> dict:
        return backward(self, loss)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.entries.append(TapeEntry(op, inputs, out, vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> dict:
    """Populate ``grad`` on every leaf reachable from ``loss``.

    Returns a mapping leaf tensor -> gradient array. Leaves that received no
    gradient are absent from the mapping and keep ``grad`` untouched.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        produced.add(entry.output.node_id)
        g = grads.pop(entry.output.node_id, None)
        if g is None:
            continue
        for t, gi in zip(entry.inputs, entry.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + gi
            else:
                grads[t.node_id] = gi
            if t.tape is None:
                leaves[t.node_id] = t
    out = {}
    for nid, leaf in leaves.items():
        if nid in grads and nid not in produced:
            leaf.grad = np.asarray(grads[nid], dtype=np.float64).reshape(leaf.shape)
            out[leaf] = leaf.grad
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _record(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def beta(a: Tensor) -> Tensor:
    """Bounded activation ``min(x, 0)``.

    Returns the literal constant 0.0 wherever ``x >= 0`` so that exact
    comparison against zero downstream is safe. The subgradient at 0 is 0.
    """
    a = as_tensor(a)
    mask = a.data < 0
    return _record("beta", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


def straight_through(hard: np.ndarray, soft: Tensor, slope: float = 1.0) -> Tensor:
    """Forward value ``hard`` exactly; backward as if it were ``slope * soft``."""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ValueError(f"shape mismatch {hard.shape} vs {soft.shape}")
    return _record("straight_through", hard.copy(), (soft,), lambda g: (g * slope,))


# reductions and shape ----------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def amax(a: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis)
        return (out,)

    return _record("amax", np.take_along_axis(a.data, idx, axis).squeeze(axis), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(
        "concatenate",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record("slice", a.data[index], (a,), vjp)


# linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", a.data @ b.data, (a, b), vjp)


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ W + b`` with ``W`` of shape ``(d, m)``.

    ``x`` may be a single vector ``(d,)`` or a batch ``(B, d)``.
    """
    x = as_tensor(x)
    if W.ndim != 2 or b.shape != (W.shape[1],):
        raise ValueError(f"bad dense parameters: W {W.shape}, b {b.shape}")
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"dense input has {x.shape[-1]} features, W expects {W.shape[0]}")
    if x.ndim == 1:
        return add(reshape(matmul(reshape(x, (1, -1)), W), (W.shape[1],)), b)
    return add(matmul(x, W), b)


def scaled_softmax(logits, theta: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax of ``theta * logits`` along ``axis`` with max-subtraction."""
    logits = as_tensor(logits)
    if logits.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    if theta <= 0:
        raise ValueError(f"temperature must be positive, got {theta}")
    z = theta * logits.data
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (theta * out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("scaled_softmax", out, (logits,), vjp)


def bce_with_logits(z: Tensor, y) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(z)`` against labels ``y``."""
    y = np.asarray(y, dtype=np.float64).reshape(z.shape)
    x = z.data
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    m = x.size

    def vjp(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * x))
        return (g * (p - y) / m,)

    return _record("bce_with_logits", np.asarray(loss.mean()), (z,), vjp)


# spatial -----------------------------------------------------------------


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (H, W, C) or (B, H, W, C), got {x.shape}")


def conv2d_same(x, kernels: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 cross-correlation with zero "same" padding.

    ``kernels`` has shape ``(Kh, Kw, Cin, Cout)`` with odd ``Kh``, ``Kw``.
    """
    x = as_tensor(x)
    kh, kw, cin, cout = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} filters")
    xb, squeeze = _batched(x.data)
    B, H, W, C = xb.shape
    if C != cin:
        raise ValueError(f"input has {C} channels, kernels expect {cin}")
    ph, pw = kh // 2, kw // 2
    padded = np.pad(xb, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    # windows: (B, H, W, C, kh, kw) -> columns ordered (kh, kw, C)
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * H * W, kh * kw * C)
    k2 = kernels.data.reshape(kh * kw * cin, cout)
    out = (cols @ k2).reshape(B, H, W, cout) + bias.data
    if squeeze:
        out = out[0]

    def vjp(g):
        g2 = g.reshape(B * H * W, cout)
        gk = (cols.T @ g2).reshape(kernels.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ k2.T).reshape(B, H, W, kh, kw, C)
            gpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, i : i + H, j : j + W, :] += gcols[:, :, :, i, j, :]
            gx = gpad[:, ph : ph + H, pw : pw + W, :]
            if squeeze:
                gx = gx[0]
        return gx, gk, gb

    return _record("conv2d_same", out, (x, kernels, bias), vjp)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first
    window entry in row-major order."""
    xb, squeeze = _batched(x.data)
    B, H, W, C = xb.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2 needs even spatial extents, got {H}x{W}")
    win = xb.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W // 2, C, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], -1)[..., 0]
    if squeeze:
        out = out[0]

    def vjp(g):
        gb = g[None] if squeeze else g
        gwin = np.zeros((B, H // 2, W // 2, C, 4))
        np.put_along_axis(gwin, idx[..., None], gb[..., None], -1)
        gx = gwin.reshape(B, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, H, W, C)
        return (gx[0] if squeeze else gx,)

    return _record("maxpool2", out, (x,), vjp)


def upsample_repeat(a, factor: int) -> Tensor:
    """Nearest-neighbour block repetition over the last two axes."""
    a = as_tensor(a)
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    out = np.repeat(np.repeat(a.data, factor, axis=-2), factor, axis=-1)
    shape = a.shape

    def vjp(g):
        h, w = shape[-2], shape[-1]
        g = g.reshape(*shape[:-2], h, factor, w, factor)
        return (g.sum(axis=(-3, -1)),)

    return _record("upsample_repeat", out, (a,), vjp)


# verification ------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, indices=None) -> float:
    """Maximum relative error between the taped gradient of scalar ``f`` at
    ``x`` and central finite differences.

    The relative error of each coordinate uses ``max(|a|, |g|, 1e-8)`` as
    denominator. ``indices`` restricts the check to a subset of flat
    coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    backward(tape, out)
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad
    flat = x0.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        plus, minus = flat.copy(), flat.copy()
        plus[i] += eps
        minus[i] -= eps
        fp = f(Tensor(plus.reshape(x0.shape))).item()
        fm = f(Tensor(minus.reshape(x0.shape))).item()
        numeric = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
