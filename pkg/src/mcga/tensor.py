"""Small tape-based reverse-mode autodiff engine over numpy arrays.

Every array-valued quantity in the models (images, feature maps, codebooks,
conv kernels) is a :class:`Tensor`. Operations record a closure that maps the
output adjoint to input adjoints; :meth:`Tensor.backward` replays them in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, UsageError

_FLOATS = (np.float32, np.float64)
_DEFAULT_DTYPE = np.float32

_grad_enabled = True
_mac_counters: list[list[int]] = []


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in _FLOATS:
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable recording; results of ops inside are constants."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates performed by :func:`matmul` inside the block.

    Yields a one-element list whose value is updated in place.
    """
    counter = [0]
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -----------------------------------------------------

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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff -------------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that is not connected to the tape")
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward() without an explicit gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        if not np.all(np.isfinite(self.data)):
            raise UsageError("backward() called on a non-finite value")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ------------------------------------------------------------

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

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

    @property
    def T(self):
        return transpose(self, None)


def _topological_order(root: Tensor) -> list[Tensor]:
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


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over broadcast axes so it matches ``shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return Tensor._make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * ad / (bd * bd), bd.shape)

    return Tensor._make(ad / bd, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def power(x: Tensor, exponent) -> Tensor:
    """``x ** exponent``; exponent may be a number or a (broadcastable) tensor.

    With a tensor exponent the base must be non-negative. At a zero base the
    adjoints are taken as zero (the one-sided limit for the exponent path).
    """
    if not isinstance(exponent, Tensor):
        p = float(exponent)
        xd = x.data
        out = xd**p
        return Tensor._make(out, (x,), lambda g: (g * p * xd ** (p - 1.0),))

    x, e = _pair(x, exponent)
    xd, ed = x.data, e.data
    if np.any(xd < 0):
        raise ValueError("power with a tensor exponent needs a non-negative base")
    out = xd**ed

    def backward(g):
        pos = xd > 0
        safe = np.where(pos, xd, 1.0)
        gx = np.where(pos, g * ed * safe ** (ed - 1.0), 0.0)
        ge = np.where(pos, g * out * np.log(safe), 0.0)
        return unbroadcast(gx.astype(xd.dtype, copy=False), xd.shape), unbroadcast(
            ge.astype(ed.dtype, copy=False), ed.shape
        )

    return Tensor._make(out, (x, e), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.log(xd), (x,), lambda g: (g / xd,))


def log1p(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.log1p(xd), (x,), lambda g: (g / (1.0 + xd),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._make(out, (x,), lambda g: (g * 0.5 / out,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return Tensor._make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),

    return Tensor._make(out, (x,), backward)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in the forward pass; blocks the adjoint."""
    return Tensor(x.data)


# -- reductions and shape ops ----------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, shape).copy(),

    return Tensor._make(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return tsum(x, axes, keepdims) * (1.0 / n)


def amax(x: Tensor) -> Tensor:
    """Global maximum; the adjoint goes to the first maximal element."""
    flat = x.data.reshape(-1)
    i = int(np.argmax(flat))
    shape = x.shape

    def backward(g):
        out = np.zeros(flat.shape, dtype=x.dtype)
        out[i] = g
        return out.reshape(shape),

    return Tensor._make(np.asarray(flat[i]), (x,), backward)


def amin(x: Tensor) -> Tensor:
    return neg(amax(neg(x)))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    return Tensor._make(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (channel axis by default)."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise DimensionError(f"cannot concat shapes {[t.shape for t in tensors]} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return out,

    return Tensor._make(x.data[index], (x,), backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    pieces, start = [], 0
    for n in sizes:
        pieces.append(slice_axis(x, start, start + n, axis))
        start += n
    return pieces


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows ``x[indices]``; adjoints are scatter-added back."""
    indices = np.asarray(indices, dtype=np.int64)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, indices, g)
        return out,

    return Tensor._make(x.data[indices], (x,), backward)


# -- linear algebra -----------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    for counter in _mac_counters:
        counter[0] += a.shape[0] * a.shape[1] * b.shape[1]
    ad, bd = a.data, b.data
    return Tensor._make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True)),

    return Tensor._make(y, (x,), backward)


# -- image ops ------------------------------------------------------------------------------


def _check_chw(x: Tensor, name: str) -> None:
    if x.ndim != 3:
        raise DimensionError(f"{name} expects a C x H x W tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a ``C_in x H x W`` input with ``C_out x C_in x k x k`` kernels."""
    _check_chw(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d kernel must be C_out x C_in x k x k, got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    if x.shape[0] != c_in:
        raise DimensionError(f"conv2d input has {x.shape[0]} channels, kernel expects {c_in}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    _, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be empty for input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((c_in, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(c_in * k * k, ho * wo)
    wmat = weight.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(c_out, 1, 1)
    padded_shape = xp.shape

    def backward(g):
        g2 = g.reshape(c_out, ho * wo)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gcols = (wmat.T @ g2).reshape(c_in, k, k, ho, wo)
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
        gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)).reshape(bias.shape))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def avg_pool_spatial(x: Tensor) -> Tensor:
    """Global average over H and W, returning ``C x 1 x 1``."""
    _check_chw(x, "avg_pool_spatial")
    return mean(x, axis=(1, 2), keepdims=True)


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor x factor`` block average."""
    _check_chw(x, "avg_pool")
    c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise DimensionError(f"cannot average-pool {x.shape} by {factor}")
    if factor == 1:
        return x
    blocks = reshape(x, (c, h // factor, factor, w // factor, factor))
    return mean(blocks, axis=(2, 4))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each cell into a ``factor x factor`` block."""
    _check_chw(x, "upsample_nearest")
    if factor < 1:
        raise ValueError("upsample factor must be positive")
    if factor == 1:
        return x
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)
    return Tensor._make(
        out, (x,), lambda g: (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)
    )


def resample(x: Tensor, height: int, width: int) -> Tensor:
    """Nearest upsampling or block averaging to reach an integer-ratio target size."""
    _, h, w = x.shape
    if (height, width) == (h, w):
        return x
    if height > h:
        if height % h or width % w or height // h != width // w:
            raise DimensionError(f"cannot resample {x.shape} to {height}x{width}")
        return upsample_nearest(x, height // h)
    if h % height or w % width or h // height != w // width:
        raise DimensionError(f"cannot resample {x.shape} to {height}x{width}")
    return avg_pool(x, h // height)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
