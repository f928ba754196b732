"""Reverse-mode autodiff over numpy arrays.

A :class:`Tensor` wraps an ndarray; every op records its parents and a
vector-Jacobian product on the output, and :func:`backward` walks the graph
once in reverse topological order. The op set is exactly what the refinement
network needs; there is no broadcasting cleverness beyond numpy's own.

Conventions:
  * parameters are Tensors created with ``requires_grad=True``;
  * op outputs track gradients only while grad recording is enabled;
  * every op output is checked for NaN/Inf unless finite checks are disabled.
"""
from __future__ import annotations

import contextlib

import numpy as np

_FINITE_CHECKS = True
_GRAD_ENABLED = True


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf while finite checks were enabled."""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


def set_finite_checks(enabled: bool) -> bool:
    """Toggle post-op NaN/Inf detection. Returns the previous setting."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prev


def finite_checks_enabled() -> bool:
    return _FINITE_CHECKS


@contextlib.contextmanager
def no_grad():
    """Context that disables graph recording (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional differentiable array (row-major numpy storage)."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._op = "leaf"
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_pool(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_pool(self, axis, keepdims)


def _fail_item(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, vjp, op: str) -> Tensor:
    """Wrap an op result, enforcing the finite invariant and recording the tape."""
    # One-pass check: the sum is non-finite iff the array holds NaN/Inf
    # (barring overflow of legitimately huge finite sums, which the training
    # regime never produces).
    if _FINITE_CHECKS and not np.isfinite(data.sum()):
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"op '{op}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._backward_done = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar tensor, accumulating into ``.grad`` of leaves.

    The graph is consumed: calling backward twice on the same graph raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise RuntimeError("backward already ran on this graph; run forward again first")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad; nothing to backpropagate")

    # Iterative post-order topological sort (graphs are deep for long trajectories).
    topo = []
    visited = {id(loss)}
    stack = [(loss, iter(loss._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if parent.requires_grad and id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            topo.append(node)
            stack.pop()

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        for parent, pgrad in zip(node._parents, node._vjp(node.grad)):
            if pgrad is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = pgrad
            else:
                parent.grad = parent.grad + pgrad
    loss._backward_done = True
    # Release the graph; leaves keep their grads.
    for node in topo:
        if node._vjp is not None:
            node._vjp = None
            node._parents = ()
            if node is not loss:
                node.grad = None


# -- elementwise and arithmetic ops -------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return (ga, gb)

    return _make(data, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), vjp, "relu")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def vjp(g):
        return (g * sign,)

    return _make(np.abs(a.data), (a,), vjp, "abs")


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data <= b.data

    def vjp(g):
        return (_unbroadcast(g * take_a, a.data.shape), _unbroadcast(g * ~take_a, b.data.shape))

    return _make(np.minimum(a.data, b.data), (a, b), vjp, "minimum")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data >= b.data

    def vjp(g):
        return (_unbroadcast(g * take_a, a.data.shape), _unbroadcast(g * ~take_a, b.data.shape))

    return _make(np.maximum(a.data, b.data), (a, b), vjp, "maximum")


# -- structural ops ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), vjp, "matmul")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), vjp, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(tensors)))

    return _make(data, tuple(tensors), vjp, "stack")


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-repeating) indexing; use :func:`gather` for integer-array indexing."""
    data = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(data, (a,), vjp, "slice")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(data, (a,), vjp, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    data = a.data.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _make(data, (a,), vjp, "transpose")


def gather(a: Tensor, index, axis: int = 0) -> Tensor:
    """Select rows along ``axis`` by an integer index array (may repeat)."""
    index = np.asarray(index, dtype=np.int64)
    data = np.take(a.data, index, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(data, (a,), vjp, "gather")


def scatter_add(a: Tensor, index, size: int) -> Tensor:
    """Sum rows of ``a`` into ``size`` output rows: ``out[j] = sum over index==j``.

    ``a`` has shape (N, ...) and ``index`` shape (N,).
    """
    index = np.asarray(index, dtype=np.int64)
    if index.shape[:1] != a.data.shape[:1]:
        raise ShapeError(f"scatter_add index shape {index.shape} vs data {a.shape}")
    data = np.zeros((size,) + a.data.shape[1:], dtype=a.data.dtype)
    np.add.at(data, index, a.data)

    def vjp(g):
        return (g[index],)

    return _make(data, (a,), vjp, "scatter_add")


# -- reductions ----------------------------------------------------------

def sum_pool(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(data, (a,), vjp, "sum")


def mean_pool(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return _make(data, (a,), vjp, "mean")


def max_pool(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.max(axis=axis, keepdims=keepdims)
    expanded = data if (keepdims or axis is None) else np.expand_dims(data, axis)
    mask = a.data == expanded
    counts = mask.sum(axis=axis, keepdims=True)

    def vjp(g):
        gg = g if (keepdims or axis is None) else np.expand_dims(g, axis)
        return (mask * (gg / counts),)

    return _make(data, (a,), vjp, "max")


# -- neural-net ops ------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight shaped (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape} vs weight {weight.shape}")
    x2 = x if x.ndim >= 2 else reshape(x, (1, x.shape[0]))
    y = matmul(x2, weight)
    if bias is not None:
        y = add(y, bias)
    if x.ndim < 2:
        y = reshape(y, (weight.shape[1],))
    return y


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, (a,), vjp, "softmax")


def dropout(a: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity (the same tensor) when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    scale = np.asarray(1.0 / (1.0 - p), dtype=a.dtype)
    mask = (rng.random(a.shape) >= p) * scale

    def vjp(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), vjp, "dropout")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data
    n = x.data.shape[-1]

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n
        )
        return (dx, dgamma, dbeta)

    return _make(data, (x, gamma, beta), vjp, "layer_norm")


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """GroupNorm over an NCHW tensor; gamma/beta are per-channel."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if c % num_groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {num_groups} groups")
    xg = x.data.reshape(n, num_groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    data = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)
    k = xg.shape[-1]

    def vjp(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * gamma.data.reshape(1, c, 1, 1)).reshape(n, num_groups, -1)
        xh = xhat.reshape(n, num_groups, -1)
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xh * (dxhat * xh).sum(axis=-1, keepdims=True) / k
        )
        return (dx.reshape(n, c, h, w), dgamma, dbeta)

    return _make(data, (x, gamma, beta), vjp, "group_norm")


def _same_pads(n: int, k: int, s: int) -> tuple[int, int]:
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding="same") -> Tensor:
    """2-d convolution on NCHW input; weight is (out, in, kh, kw).

    ``padding`` is ``"same"`` (output = ceil(input / stride), zero padding
    biased to the high side), an int (symmetric), or 0 for no padding.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW x and OIHW weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {c} vs weight {ci}")
    if padding == "same":
        ph0, ph1 = _same_pads(h, kh, stride)
        pw0, pw1 = _same_pads(w, kw, stride)
    else:
        ph0 = ph1 = pw0 = pw1 = int(padding)

    if kh == 1 and kw == 1 and ph0 == ph1 == pw0 == pw1 == 0:
        return _conv2d_1x1(x, weight, bias, stride)

    if ph0 or ph1 or pw0 or pw1:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    else:
        xp = x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output collapsed: input {x.shape}, kernel {kh}x{kw}, stride {stride}")

    # Channel-first copy once, then contiguous window slices.
    xpt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xpt[:, :, i:i + (ho - 1) * stride + 1:stride,
                                j:j + (wo - 1) * stride + 1:stride]
    cols2 = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(o, c * kh * kw)
    y = np.ascontiguousarray((w2 @ cols2).reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    if bias is not None:
        y += bias.data.reshape(1, o, 1, 1)

    def vjp(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        dw = (g2 @ cols2.T).reshape(weight.data.shape) if weight.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if (bias is not None and bias.requires_grad) else None
        dx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
            dxpt = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxpt[:, :, i:i + (ho - 1) * stride + 1:stride,
                         j:j + (wo - 1) * stride + 1:stride] += dcols[:, i, j]
            dx = dxpt.transpose(1, 0, 2, 3)
            if ph0 or ph1 or pw0 or pw1:
                dx = dx[:, :, ph0:hp - ph1 if ph1 else None, pw0:wp - pw1 if pw1 else None]
            dx = np.ascontiguousarray(dx)
        if bias is None:
            return (dx, dw)
        return (dx, dw, db)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, vjp, "conv2d")


def _conv2d_1x1(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int) -> Tensor:
    """Pointwise conv as a single matmul; strided inputs are sliced first."""
    n, c, h, w = x.shape
    o = weight.shape[0]
    src = x.data if stride == 1 else x.data[:, :, ::stride, ::stride]
    ho, wo = src.shape[2], src.shape[3]
    x2 = src.transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    w2 = weight.data.reshape(o, c)
    y = np.ascontiguousarray((w2 @ x2).reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    if bias is not None:
        y += bias.data.reshape(1, o, 1, 1)

    def vjp(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        dw = (g2 @ x2.T).reshape(weight.data.shape) if weight.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if (bias is not None and bias.requires_grad) else None
        dx = None
        if x.requires_grad:
            dsrc = (w2.T @ g2).reshape(c, n, ho, wo).transpose(1, 0, 2, 3)
            if stride == 1:
                dx = np.ascontiguousarray(dsrc)
            else:
                dx = np.zeros_like(x.data)
                dx[:, :, ::stride, ::stride] = dsrc
        if bias is None:
            return (dx, dw)
        return (dx, dw, db)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, vjp, "conv2d")


def _up2_indices(n: int):
    # align_corners=False: output o samples input at o/2 - 0.25, clamped at edges
    src = np.arange(2 * n) / 2.0 - 0.25
    i0 = np.clip(np.floor(src), 0, n - 1).astype(np.int64)
    i1 = np.clip(i0 + 1, 0, n - 1)
    w = np.clip(src, 0, n - 1) - i0
    return i0, i1, w


def bilinear_upsample_2x(x: Tensor) -> Tensor:
    """Double the spatial dims of an NCHW tensor with bilinear interpolation."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample_2x expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    hi0, hi1, hw_ = _up2_indices(h)
    wi0, wi1, ww_ = _up2_indices(w)
    whv = hw_.reshape(1, 1, -1, 1).astype(x.data.dtype)
    wwv = ww_.reshape(1, 1, 1, -1).astype(x.data.dtype)
    xh = x.data[:, :, hi0, :] * (1 - whv) + x.data[:, :, hi1, :] * whv
    y = xh[:, :, :, wi0] * (1 - wwv) + xh[:, :, :, wi1] * wwv

    def vjp(g):
        gh = np.zeros((n, c, 2 * h, w), dtype=g.dtype)
        tmp = np.moveaxis(gh, 3, 0)
        np.add.at(tmp, wi0, np.moveaxis(g * (1 - wwv), 3, 0))
        np.add.at(tmp, wi1, np.moveaxis(g * wwv, 3, 0))
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        tmp2 = np.moveaxis(dx, 2, 0)
        np.add.at(tmp2, hi0, np.moveaxis(gh * (1 - whv), 2, 0))
        np.add.at(tmp2, hi1, np.moveaxis(gh * whv, 2, 0))
        return (dx,)

    return _make(y, (x,), vjp, "bilinear_upsample_2x")
