"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a C-contiguous ``numpy.float64`` array. Operations record
their inputs and a local gradient rule on the output tensor, so the
computation graph is the implicit DAG of parent references. ``backward()``
on a scalar root walks that DAG once in reverse topological order and adds
the fresh gradient into ``grad`` of every reachable tensor that has
``requires_grad=True``. Calling backward again accumulates another copy
until ``zero_grad()`` resets the buffers; this is intentional, since several
loss terms may share parameters.

Shape discipline is strict: except for the channel-bias add (bias indexed by
the leading axis, broadcast over the rest), operands must match exactly and
mismatches raise :class:`ShapeError` naming both shapes.

Graph construction and backward are single-threaded per graph; tensors that
no graph references may be handed freely between threads.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Smallest positive double; softmax outputs are floored here so that they
# stay strictly positive even when a logit sits ~1500 below the maximum.
_TINY = np.nextafter(0.0, 1.0)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """The autodiff graph cannot satisfy the request (e.g. non-scalar root)."""


class Tensor:
    """An n-dimensional float64 array that may participate in autodiff.

    Only leaf tensors are created with ``requires_grad=True``; tensors
    produced by operations inherit it from their inputs. ``grad`` stays
    ``None`` until a backward pass deposits something.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            # keep 0-d arrays 0-d; ascontiguousarray would promote them to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A graph-free view of the same values (shares the buffer)."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate gradients of this scalar w.r.t. every reachable tensor.

        Gradients accumulate across calls; use ``zero_grad`` between steps.
        """
        if self.data.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {self.shape}")
        if not self._parents:
            raise GraphError("backward root was not produced by recorded operations")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        # Flow the fresh gradient through a scratch map so stale .grad
        # buffers from earlier passes never get re-propagated.
        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g  # the scratch buffer is exclusively ours
            else:
                node.grad += g
            if node._backward is None:
                continue
            for parent, contribution in zip(node._parents, node._backward(g)):
                if contribution is None or not parent.requires_grad:
                    continue
                key = id(parent)
                held = flowing.get(key)
                if held is None:
                    # private copy: the contribution may alias g or be a view
                    buf = np.empty_like(parent.data)
                    np.copyto(buf, contribution)
                    flowing[key] = buf
                else:
                    held += contribution

    # Operator sugar; scalars go through scale/shift, tensors stay strict.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    """Explicit zero-gradients step for a parameter collection."""
    for t in tensors:
        t.zero_grad()


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result; record the graph only if some input needs grads."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and scalar ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),))


def log(a: Tensor) -> Tensor:
    """Natural log; callers are responsible for keeping inputs positive."""
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through the interior only."""
    if not lo < hi:
        raise ValueError(f"clip: empty interval [{lo}, {hi}]")

    def backward(g):
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


# ---------------------------------------------------------------------------
# structural ops

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    first = tensors[0]
    axis = axis % max(first.ndim, 1)
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            i != axis and t.shape[i] != first.shape[i] for i in range(t.ndim)
        ):
            raise ShapeError(f"concat: shapes {first.shape} and {t.shape} differ off axis {axis}")
    widths = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        pieces = []
        for lo, hi in zip(offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            pieces.append(g[tuple(index)])
        return tuple(pieces)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def select(a: Tensor, index: int) -> Tensor:
    """Pick one entry of a 1-D tensor as a scalar."""
    if a.ndim != 1:
        raise ShapeError(f"select expects a 1-D tensor, got shape {a.shape}")
    index = int(index)
    if not 0 <= index < a.shape[0]:
        raise IndexError(f"select: index {index} out of range for length {a.shape[0]}")

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        return (buf,)

    return _make(np.asarray(a.data[index]), (a,), backward)


# ---------------------------------------------------------------------------
# reductions

def tensor_sum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full_like(a.data, float(g)),))


def tensor_mean(a: Tensor) -> Tensor:
    n = a.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full_like(a.data, float(g) / n),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [c, h, w] -> [c]."""
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool expects [c, h, w], got shape {x.shape}")
    _, h, w = x.shape
    area = h * w

    def backward(g):
        return (np.broadcast_to(g[:, None, None] / area, x.shape),)

    return _make(x.data.mean(axis=(1, 2)), (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and convolution

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return (ga, gb)

    return _make(a.data @ b.data, (a, b), backward)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias indexed by the leading axis of ``x``.

    This is the only sanctioned broadcast; every other shape mismatch is an
    error.
    """
    if bias.ndim != 1 or x.ndim < 1 or bias.shape[0] != x.shape[0]:
        raise ShapeError(
            f"add_channel_bias: bias {bias.shape} does not match leading axis of {x.shape}"
        )
    expand = (slice(None),) + (None,) * (x.ndim - 1)

    def backward(g):
        axes = tuple(range(1, g.ndim))
        return (g, g.sum(axis=axes) if axes else g)

    return _make(x.data + bias.data[expand], (x, bias), backward)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of [c_in, h, w] with [c_out, c_in, kh, kw].

    Output spatial extent is ``floor((h + 2*padding - kh) / stride) + 1`` per
    axis. No kernel flip is applied.
    """
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(
            f"conv2d expects image [c,h,w] and kernels [o,c,kh,kw], got {x.shape} and {kernels.shape}"
        )
    if kernels.shape[1] != x.shape[0]:
        raise ShapeError(
            f"conv2d: kernel channels {kernels.shape} do not match input {x.shape}"
        )
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be non-negative, got {padding}")
    c_in, h, w = x.shape
    c_out, _, kh, kw = kernels.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: kernel {kernels.shape} larger than padded input {x.shape} (padding={padding})"
        )
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.tensordot(kernels.data, windows, axes=([1, 2, 3], [0, 3, 4]))

    def backward(g):
        gk = None
        gx = None
        if kernels.requires_grad:
            gk = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        if x.requires_grad:
            # scatter-add each kernel tap's contribution back onto the input
            contrib = np.tensordot(g, kernels.data, axes=([0], [0]))  # (h', w', c_in, kh, kw)
            gxp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                        contrib[:, :, :, i, j].transpose(2, 0, 1)
                    )
            gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gk)

    return _make(out, (x, kernels), backward)


# ---------------------------------------------------------------------------
# softmax family

def softmax_logits(z: Tensor, temperature: float = 1.0) -> Tensor:
    """Temperature softmax of a 1-D logit vector, max-subtracted for safety.

    Outputs are floored at the smallest positive double so they remain
    strictly positive even for extreme logit spreads; the distortion is far
    below any tolerance used here.
    """
    if z.ndim != 1:
        raise ShapeError(f"softmax_logits expects a 1-D tensor, got shape {z.shape}")
    temperature = float(temperature)
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    zt = z.data / temperature
    e = np.exp(zt - zt.max())
    p = np.maximum(e / e.sum(), _TINY)

    def backward(g):
        return (p * (g - float(np.dot(g, p))) / temperature,)

    return _make(p, (z,), backward)


def log_sum_exp(z: Tensor) -> Tensor:
    """Fused log(sum(exp(z))) of a 1-D tensor, max-subtracted."""
    if z.ndim != 1:
        raise ShapeError(f"log_sum_exp expects a 1-D tensor, got shape {z.shape}")
    m = z.data.max()
    e = np.exp(z.data - m)
    s = e.sum()
    return _make(np.asarray(m + np.log(s)), (z,), lambda g: (float(g) * e / s,))
