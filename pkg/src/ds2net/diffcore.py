"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable operation builds a node holding its parents and a
closure mapping the output gradient to parent gradients. ``Tensor.backward``
walks the graph in reverse topological order, visiting each node once and
accumulating gradients where a tensor feeds several consumers.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "tensor",
    "no_grad",
    "detect_anomaly",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "exp",
    "log",
    "sigmoid",
    "relu",
    "leaky_relu",
    "tanh",
    "matmul",
    "conv2d",
    "conv_output_size",
    "reduce",
    "softmax",
    "log_softmax",
    "reshape",
    "transpose",
    "concat",
    "slice_axis",
    "pad_channels",
    "upsample_bilinear",
    "bilinear_matrix",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(FloatingPointError):
    """A non-finite value was produced; ``op`` names the offending operation."""

    def __init__(self, op: str, message: str = ""):
        self.op = op
        super().__init__(message or f"non-finite output produced by op '{op}'")


_GRAD_ENABLED = True
_ANOMALY = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def detect_anomaly():
    """Raise :class:`NumericError` at the first op whose output is not finite."""
    global _ANOMALY
    prev = _ANOMALY
    _ANOMALY = True
    try:
        yield
    finally:
        _ANOMALY = prev


class Tensor:
    """Dense float array with an optional place in a differentiable graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- graph construction -------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        if _ANOMALY and not np.all(np.isfinite(data)):
            raise NumericError(op)
        out = Tensor(data)
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            # Flags are captured now: a parent frozen while the graph was built
            # stays out of this backward pass even if it is unfrozen later.
            out._parents = tuple(p if p.requires_grad else None for p in parents)
            out._backward = backward
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every graph tensor."""
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")

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
                if p is not None and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or parent is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ----------------------------------------------------------
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

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# -- elementwise ---------------------------------------------------------------

def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    n = max(len(a), len(b))
    pa = (1,) * (n - len(a)) + a
    pb = (1,) * (n - len(b)) + b
    out = []
    for da, db in zip(pa, pb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"cannot broadcast shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b, op: str) -> Tensor:
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = _as_tensor(a, b)
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape)
    x, y = a.data, b.data
    sa, sb = a.shape, b.shape
    if op == "add":
        out = x + y

        def bw(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)
    elif op == "sub":
        out = x - y

        def bw(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)
    elif op == "mul":
        out = x * y

        def bw(g):
            return _unbroadcast(g * y, sa), _unbroadcast(g * x, sb)
    elif op == "div":
        out = x / y

        def bw(g):
            return _unbroadcast(g / y, sa), _unbroadcast(-g * x / (y * y), sb)
    else:
        raise ValueError(f"unknown binary op {op!r}")
    return Tensor._make(out, (a, b), bw, op)


def add(a, b) -> Tensor:
    return _binary(a, b, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul")


def div(a, b) -> Tensor:
    return _binary(a, b, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.dtype.type(factor)
    return Tensor._make(a.data * f, (a,), lambda g: (g * f,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._make(np.log(x), (a,), lambda g: (g / x,), "log")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return Tensor._make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    factor = np.where(x > 0, x.dtype.type(1), x.dtype.type(slope))
    return Tensor._make(x * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


_UNARY = {
    "exp": exp,
    "log": log,
    "neg": neg,
    "sigmoid": sigmoid,
    "relu": relu,
    "tanh": tanh,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Tensor, b=None, *, slope: float = 0.2, factor: float = 1.0) -> Tensor:
    """Dispatch an elementwise op by name."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    if kind == "scale":
        return scale(a, factor)
    raise ValueError(f"unknown elementwise op {kind!r}")


# -- linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched over a shared leading axis."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    out = x @ y

    def bw(g):
        return g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g

    return Tensor._make(out, (a, b), bw, "matmul")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    if size + 2 * pad < k:
        raise ShapeError(f"kernel {k} larger than padded input {size}+2*{pad}")
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OCkk weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {o} output channels")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)

    # channel-major working layout keeps the output-pixel axis innermost
    xc = x.data.transpose(1, 0, 2, 3)
    xp = np.pad(xc, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xc
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (c, kh, kw, n, ho, wo) -> one column per output pixel
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = gm.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            if pad:
                gxp = gxp[:, :, pad:pad + h, pad:pad + wd]
            gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return Tensor._make(out, parents, bw, "conv2d")


# -- reductions --------------------------------------------------------------------

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-D tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axes`` (all axes when None)."""
    ax = _norm_axes(axes, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in ax else d for i, d in enumerate(shape))
    if kind == "sum":
        out = x.data.sum(axis=ax, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept), shape).copy(),)
    elif kind == "mean":
        count = int(np.prod([shape[i] for i in ax])) if ax else 1
        out = x.data.mean(axis=ax, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept) / count, shape).astype(x.dtype),)
    elif kind == "max":
        out = x.data.max(axis=ax, keepdims=keepdims)
        hit = x.data == out.reshape(kept)
        # ties share the gradient evenly
        share = (hit / hit.sum(axis=ax, keepdims=True)).astype(x.dtype)

        def bw(g):
            return (g.reshape(kept) * share,)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return Tensor._make(np.asarray(out), (x,), bw, kind)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), bw, "log_softmax")


# -- shape manipulation --------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from exc
    src = x.shape
    return Tensor._make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join along ``axis``; result is a copy, gradients are split back to sources."""
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref.shape)) if i != axis
        ):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {ref.shape} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return Tensor._make(out, tuple(tensors), bw, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Copying slice ``[start:stop]`` along one axis."""
    axis = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx].copy()

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return Tensor._make(out, (x,), bw, "slice")


def pad_channels(x: Tensor, extra: int) -> Tensor:
    """Append ``extra`` zero channels on axis 1."""
    if extra == 0:
        return x
    zeros = Tensor(np.zeros((x.shape[0], extra) + x.shape[2:], dtype=x.dtype))
    return concat([x, zeros], axis=1)


# -- resampling -----------------------------------------------------------------

def bilinear_matrix(n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    """Interpolation weights (n_out x n_in), half-pixel centres, edges clamped."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * ratio - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Resize the two trailing axes of an NCHW tensor to ``size``."""
    h, w = x.shape[-2:]
    ah = bilinear_matrix(h, size[0], x.dtype)
    aw = bilinear_matrix(w, size[1], x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", ah, x.data, aw, optimize=True)

    def bw(g):
        return (np.einsum("ih,ncij,jw->nchw", ah, g, aw, optimize=True),)

    return Tensor._make(out, (x,), bw, "upsample_bilinear")


# -- gradient checking ---------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor. Run with float64 inputs.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    y = f(xt)
    if y.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
    y.backward()
    g_ad = xt.grad if xt.grad is not None else np.zeros_like(base)

    g_fd = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = g_fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(base.copy())).item()
            flat[i] = orig - eps
            fm = f(Tensor(base.copy())).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    err = np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    return float(err.max()) if err.size else 0.0


def parameters_grad_check(
    f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5
) -> float:
    """Like :func:`grad_check` but perturbs existing float64 leaf tensors in place."""
    params = list(params)
    for p in params:
        p.grad = None
    y = f()
    if y.size != 1:
        raise ShapeError(f"gradient check needs a scalar output, got shape {y.shape}")
    y.backward()
    worst = 0.0
    with no_grad():
        for p in params:
            g_ad = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            g_fd = np.zeros(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                g_fd[i] = (fp - fm) / (2 * eps)
            err = np.abs(g_ad.reshape(-1) - g_fd) / np.maximum(1e-8, np.abs(g_ad.reshape(-1)) + np.abs(g_fd))
            if err.size:
                worst = max(worst, float(err.max()))
    return worst
