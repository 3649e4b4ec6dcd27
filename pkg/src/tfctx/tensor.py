"""Dense tensors with reverse-mode differentiation.

The engine is deliberately small: it implements exactly the primitives the
context blocks, backbone and losses need, on top of numpy arrays in double
precision. Every operation that produces a tensor from recorded inputs
attaches a closure computing the vector-Jacobian product; ``backward`` on a
scalar replays the recorded graph once, in reverse topological order.

Stored values are required to be finite. A NaN or Inf anywhere raises
``NumericalError`` at the op that produced it instead of propagating silently.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

DEFAULT_DTYPE = np.float64


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """N-dimensional real array, optionally recording ops for backward().

    ``data`` is a row-major numpy array (float64 unless built otherwise),
    ``grad`` is populated with an identically shaped array after backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        if not np.all(np.isfinite(self.data)):
            raise NumericalError("tensor holds non-finite values")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], None] | None = None
        self._backward_done = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                 vjp: Callable[[np.ndarray], None]) -> "Tensor":
        """Record one primitive application. ``vjp`` receives the output
        gradient and must accumulate into each requiring parent's ``grad``."""
        out = cls.__new__(cls)
        out.data = data
        if not np.all(np.isfinite(data)):
            raise NumericalError("operation produced non-finite values")
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._backward_done = False
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    # -- basic introspection ------------------------------------------------

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
            raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # own a fresh buffer: g may be a view or borrowed array
            self.grad = np.array(g)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every reachable requires_grad tensor.

        Only valid on scalars (one element). Calling it a second time on the
        same recorded graph is an error: the tape is consumed by the replay.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_done:
            raise RuntimeError("backward already called on this graph; re-record the forward pass first")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any requires_grad tensor")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)
                node._backward_done = True
        self._backward_done = True

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims=False):
        return reduce(self, axes, "sum", keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce(self, axes, "mean", keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce(self, axes, "max", keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data + b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._from_op(out_data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data * b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(out_data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data / b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(out_data, (a, b), vjp)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def vjp(g):
        x._accumulate(g * y)

    return Tensor._from_op(y, (x,), vjp)


def log(x: Tensor) -> Tensor:
    y = np.log(x.data)

    def vjp(g):
        x._accumulate(g / x.data)

    return Tensor._from_op(y, (x,), vjp)


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)

    def vjp(g):
        x._accumulate(g * (0.5 / y))

    return Tensor._from_op(y, (x,), vjp)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    y = np.maximum(x.data, floor)

    def vjp(g):
        x._accumulate(g * (x.data >= floor))

    return Tensor._from_op(y, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)

    def vjp(g):
        x._accumulate(g * (x.data > 0))

    return Tensor._from_op(y, (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def vjp(g):
        x._accumulate(g * (1.0 - y * y))

    return Tensor._from_op(y, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    # exp(-logaddexp(0, -x)) = 1/(1+e^-x), stable for large |x|
    y = np.exp(-np.logaddexp(0.0, -x.data))

    def vjp(g):
        x._accumulate(g * y * (1.0 - y))

    return Tensor._from_op(y, (x,), vjp)


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity; kind is one of relu|tanh|sigmoid."""
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None


# -- reductions and softmax ---------------------------------------------------

def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(a) % ndim if -ndim <= int(a) < ndim else int(a) for a in axes)
    if len(axes) == 0:
        raise ShapeError("empty axis set")
    for a in axes:
        if not 0 <= a < ndim:
            raise ShapeError(f"axis {a} out of range for rank-{ndim} tensor")
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate axes in {axes}")
    return tuple(sorted(axes))


def reduce(x: Tensor, axes, kind: str, keepdims: bool = False) -> Tensor:
    """sum / mean / max over ``axes``. Max ties route gradient to the lowest
    flat index of the reduced slice, so backward is deterministic."""
    axes = _normalize_axes(axes, x.ndim)
    if kind == "sum":
        y = x.data.sum(axis=axes, keepdims=keepdims)

        def vjp(g):
            gg = g if keepdims else np.expand_dims(g, axes)
            x._accumulate(np.broadcast_to(gg, x.shape).copy())

    elif kind == "mean":
        count = int(np.prod([x.shape[a] for a in axes]))
        y = x.data.mean(axis=axes, keepdims=keepdims)

        def vjp(g):
            gg = g if keepdims else np.expand_dims(g, axes)
            x._accumulate(np.broadcast_to(gg / count, x.shape).copy())

    elif kind == "max":
        y = x.data.max(axis=axes, keepdims=keepdims)
        end = tuple(range(x.ndim - len(axes), x.ndim))
        moved = np.moveaxis(x.data, axes, end)
        outer_shape = moved.shape[: x.ndim - len(axes)]
        inner = int(np.prod(moved.shape[x.ndim - len(axes):]))
        # argmax of the C-ordered reduced slice == lowest flat index among ties
        argmax = moved.reshape(outer_shape + (inner,)).argmax(axis=-1)

        def vjp(g):
            gg = g if keepdims else np.expand_dims(g, axes)
            gg = np.broadcast_to(gg, x.shape)
            src = np.ascontiguousarray(np.moveaxis(gg, axes, end)).reshape(outer_shape + (inner,))
            gm = np.zeros(outer_shape + (inner,))
            np.put_along_axis(gm, argmax[..., None],
                              np.take_along_axis(src, argmax[..., None], axis=-1), axis=-1)
            x._accumulate(np.moveaxis(gm.reshape(moved.shape), end, axes))

    else:
        raise ValueError(f"unknown reduce kind {kind!r}")
    return Tensor._from_op(y, (x,), vjp)


def softmax_over(x: Tensor, axes) -> Tensor:
    """Softmax normalized jointly over ``axes``, computed with max
    subtraction so huge logits cannot overflow."""
    axes = _normalize_axes(axes, x.ndim)
    shifted = x.data - x.data.max(axis=axes, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axes, keepdims=True)

    def vjp(g):
        x._accumulate(s * (g - (g * s).sum(axis=axes, keepdims=True)))

    return Tensor._from_op(s, (x,), vjp)


# -- shape manipulation -------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    y = x.data.reshape(shape)

    def vjp(g):
        x._accumulate(g.reshape(x.shape))

    return Tensor._from_op(y, (x,), vjp)


def moveaxis(x: Tensor, src, dst) -> Tensor:
    y = np.moveaxis(x.data, src, dst)

    def vjp(g):
        x._accumulate(np.moveaxis(g, dst, src))

    return Tensor._from_op(y.copy(), (x,), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along one axis."""
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"slice [{start}:{start + length}) out of range for axis {axis} of {x.shape}")
    idx = tuple(slice(None) if a != axis else slice(start, start + length) for a in range(x.ndim))
    y = x.data[idx].copy()

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        x._accumulate(full)

    return Tensor._from_op(y, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    y = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def vjp(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            idx = tuple(slice(None) if a != (axis % g.ndim) else slice(offset, offset + n) for a in range(g.ndim))
            if t.requires_grad:
                t._accumulate(g[idx])
            offset += n

    return Tensor._from_op(y, tuple(tensors), vjp)


# -- contractions -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    y = a.data @ b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._from_op(y, (a, b), vjp)


def _einsum_grad_spec(spec: str):
    ins, out = spec.split("->")
    sub_a, sub_b = ins.split(",")
    for own, other in ((sub_a, sub_b), (sub_b, sub_a)):
        missing = set(own) - set(out) - set(other)
        if missing:
            raise ShapeError(f"einsum2 cannot differentiate spec {spec!r}: index {missing} is private to one operand")
    return sub_a, sub_b, out


def einsum2(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum with automatic VJPs (no repeated indices)."""
    sub_a, sub_b, out = _einsum_grad_spec(spec)
    y = np.einsum(spec, a.data, b.data, optimize=True)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(np.einsum(f"{out},{sub_b}->{sub_a}", g, b.data, optimize=True))
        if b.requires_grad:
            b._accumulate(np.einsum(f"{out},{sub_a}->{sub_b}", g, a.data, optimize=True))

    return Tensor._from_op(y, (a, b), vjp)


# -- structured ops -----------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2D cross-correlation of NCHW input with OIHW weights.

    Output spatial extents follow floor((n + 2*pad - k)/stride) + 1.
    Implemented as one GEMM per kernel tap, which keeps both directions
    BLAS-bound without materializing im2col patches.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    n, cin, f, t = x.shape
    cout, cin_w, kf, kt = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    sf, st = (stride, stride) if isinstance(stride, int) else tuple(stride)
    pf, pt = (padding, padding) if isinstance(padding, int) else tuple(padding)
    if kf > f + 2 * pf or kt > t + 2 * pt:
        raise ShapeError(f"kernel ({kf},{kt}) larger than padded input ({f + 2 * pf},{t + 2 * pt})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")

    fo = (f + 2 * pf - kf) // sf + 1
    to = (t + 2 * pt - kt) // st + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pf, pf), (pt, pt))) if (pf or pt) else x.data

    # two equivalent contraction orders; the patch-einsum route wins for
    # narrow inputs, the per-tap GEMM loop for wide ones (measured)
    patch_route = cin * kf * kt <= 300
    if patch_route:
        patches = np.lib.stride_tricks.sliding_window_view(xp, (kf, kt), axis=(2, 3))
        patches = patches[:, :, ::sf, ::st]
        out = np.einsum("ncftab,kcab->nkft", patches, weight.data, optimize=True)
    else:
        acc = np.zeros((n, fo, to, cout))
        for a in range(kf):
            for b in range(kt):
                xs = xp[:, :, a: a + (fo - 1) * sf + 1: sf, b: b + (to - 1) * st + 1: st]
                acc += np.tensordot(xs, weight.data[:, :, a, b], axes=([1], [1]))
        out = np.ascontiguousarray(np.moveaxis(acc, 3, 1))
    if bias is not None:
        out += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            if patch_route:
                patches = np.lib.stride_tricks.sliding_window_view(xp, (kf, kt), axis=(2, 3))
                weight._accumulate(np.einsum("nkft,ncftab->kcab", g,
                                             patches[:, :, ::sf, ::st], optimize=True))
            else:
                gm = np.moveaxis(g, 1, 3)
                dw = np.empty_like(weight.data)
                for a in range(kf):
                    for b in range(kt):
                        xs = xp[:, :, a: a + (fo - 1) * sf + 1: sf, b: b + (to - 1) * st + 1: st]
                        dw[:, :, a, b] = np.tensordot(gm, xs, axes=([0, 1, 2], [0, 2, 3]))
                weight._accumulate(dw)
        if x.requires_grad:
            if sf == st == 1 and kf - 1 >= pf and kt - 1 >= pt and cout * kf * kt <= 300:
                # stride-1 input gradient is itself a correlation of the
                # output gradient with the flipped kernel: no scatter needed
                gp = np.pad(g, ((0, 0), (0, 0), (kf - 1 - pf,) * 2, (kt - 1 - pt,) * 2))
                gpatches = np.lib.stride_tricks.sliding_window_view(gp, (kf, kt), axis=(2, 3))
                wflip = weight.data[:, :, ::-1, ::-1]
                x._accumulate(np.einsum("nkftab,kcab->ncft", gpatches, wflip, optimize=True))
            else:
                gm = np.moveaxis(g, 1, 3)
                dxp = np.zeros((n, cin, f + 2 * pf, t + 2 * pt))
                for a in range(kf):
                    for b in range(kt):
                        contrib = np.tensordot(gm, weight.data[:, :, a, b], axes=([3], [0]))
                        dxp[:, :, a: a + (fo - 1) * sf + 1: sf, b: b + (to - 1) * st + 1: st] += np.moveaxis(contrib, 3, 1)
                x._accumulate(dxp[:, :, pf: pf + f, pt: pt + t])

    return Tensor._from_op(out, parents, vjp)


def conv1d_same(x: Tensor, kernel: Tensor) -> Tensor:
    """Same-size 1D correlation along the last axis of a (N, C) tensor,
    zero-padded; kernel length must be odd."""
    (k,) = kernel.shape
    if k % 2 == 0:
        raise ShapeError(f"conv1d_same kernel length must be odd, got {k}")
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (p, p)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # (N, C, k)
    y = windows @ kernel.data

    def vjp(g):
        if kernel.requires_grad:
            kernel._accumulate(np.einsum("nck,nc->k", windows, g))
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (p, p)))
            gwin = np.lib.stride_tricks.sliding_window_view(gp, k, axis=1)
            x._accumulate(gwin @ kernel.data[::-1].copy())

    return Tensor._from_op(y, (x, kernel), vjp)


class RunningStats:
    """Per-channel running mean/variance for batch norm inference."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        self.mean = (1.0 - m) * self.mean + m * mean
        self.var = (1.0 - m) * self.var + m * var


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
                 training: bool = True, running: RunningStats | None = None) -> Tensor:
    """Per-channel normalization of an (N, C, F, T) tensor.

    Training mode normalizes with the batch statistics over (N, F, T) and
    updates ``running``; inference mode normalizes with the running stats.
    """
    if eps <= 0:
        raise ValueError("batch_norm2d eps must be positive")
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects rank-4 input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running is not None:
            running.update(mean, var)
    else:
        if running is None:
            raise ValueError("inference-mode batch_norm2d needs running stats")
        mean, var = running.mean, running.var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def vjp(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gh = g * gamma.data[None, :, None, None]
            if training:
                mu_g = gh.mean(axis=(0, 2, 3), keepdims=True)
                mu_gx = (gh * xhat).mean(axis=(0, 2, 3), keepdims=True)
                x._accumulate(inv[None, :, None, None] * (gh - mu_g - xhat * mu_gx))
            else:
                x._accumulate(gh * inv[None, :, None, None])

    return Tensor._from_op(y, (x, gamma, beta), vjp)


_POOL_MATRICES: dict[tuple[int, int], np.ndarray] = {}


def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    key = (n_in, n_out)
    if key not in _POOL_MATRICES:
        m = np.zeros((n_out, n_in))
        for i in range(n_out):
            lo = (i * n_in) // n_out
            hi = -(-(i + 1) * n_in // n_out)  # ceil
            m[i, lo:hi] = 1.0 / (hi - lo)
        _POOL_MATRICES[key] = m
    return _POOL_MATRICES[key]


def adaptive_avg_pool2d(x: Tensor, out_size: tuple[int, int]) -> Tensor:
    """Rescale the trailing (F, T) extents of an (N, C, F, T) tensor by
    averaging over near-uniform cells, torch-style index arithmetic."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d expects rank-4 input, got {x.shape}")
    fo, to = out_size
    _, _, f, t = x.shape
    if (f, t) == (fo, to):
        return x
    pf = _pool_matrix(f, fo)
    pt = _pool_matrix(t, to)
    y = np.einsum("ncft,af,bt->ncab", x.data, pf, pt, optimize=True)

    def vjp(g):
        x._accumulate(np.einsum("ncab,af,bt->ncft", g, pf, pt, optimize=True))

    return Tensor._from_op(y, (x,), vjp)


# -- gradient oracle ----------------------------------------------------------

def finite_diff_check(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    Returns max over elements of |analytic - numeric| / max(1, |analytic|,
    |numeric|); ``fn`` must map a tensor to a scalar tensor.
    """
    if h <= 0:
        raise ValueError("finite_diff_check step must be positive")
    base = x.data.copy()

    probe = Tensor(base.copy(), requires_grad=True)
    loss = fn(probe)
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ShapeError("finite_diff_check needs a scalar-valued function")
    loss.backward()
    analytic = probe.grad.reshape(-1).copy() if probe.grad is not None else np.zeros(base.size)

    numeric = np.empty(base.size)
    flat = base.reshape(-1)
    for i in range(base.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(Tensor(base)).item()
        flat[i] = orig - h
        down = fn(Tensor(base)).item()
        flat[i] = orig
        numeric[i] = (up - down) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0


def finite_diff_check_params(loss_fn: Callable[[], Tensor],
                             named_params: Iterable[tuple[str, Tensor]],
                             h: float = 1e-5) -> dict[str, float]:
    """Check recorded gradients of named parameters against central
    differences.

    ``loss_fn`` re-runs the forward pass reading each parameter's current
    ``data``; parameters are perturbed in place for the numeric side.
    Returns the max relative error per parameter name.
    """
    params = list(named_params)
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params}
    for _, p in params:
        p.grad = None

    flags = [p.requires_grad for _, p in params]
    for _, p in params:
        p.requires_grad = False
    try:
        errors: dict[str, float] = {}
        for name, p in params:
            flat = p.data.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2.0 * h)
            a = analytic[name].reshape(-1)
            denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
            errors[name] = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
    finally:
        for (_, p), flag in zip(params, flags):
            p.requires_grad = flag
    return errors


# -- binary dump format -------------------------------------------------------

def save_tensor(f, array: np.ndarray) -> None:
    """Write the raw dump format: u64 rank, u64 extents, float64 data, all
    little-endian."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    f.write(struct.pack("<Q", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes(order="C"))


def load_tensor(f) -> np.ndarray:
    raw = f.read(8)
    if len(raw) != 8:
        raise ValueError("truncated tensor dump header")
    (rank,) = struct.unpack("<Q", raw)
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(f.read(8 * count), dtype="<f8", count=count)
    return data.reshape(shape).astype(np.float64)
