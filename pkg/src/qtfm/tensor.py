"""Dense tensors with reverse-mode automatic differentiation.

Values are held as float64 numpy arrays in row-major order.  Every operation
records its parents and a gradient closure on the output tensor; calling
``backward`` on a scalar walks the recorded graph once in reverse topological
order and accumulates gradients into the ``grad`` field of leaf tensors that
were created with ``requires_grad=True``.

The op set is exactly what the encoder-decoder model needs: matmul, softmax,
layer norm, ReLU, 2D convolution, causal 1D convolution, max pooling,
embedding lookup, dropout, and the shape/arithmetic glue around them.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense array of real values, optionally tracked by the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple["Tensor", ...], grad_fn) -> "Tensor":
        """Wrap an op result, recording parents when the tape is active."""
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._grad_fn = grad_fn
        return out

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def is_finite(self) -> bool:
        """True when every element is a finite real (no NaN/Inf)."""
        return bool(np.isfinite(self.data).all())

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, Tensor(1.0 / other))
        raise TypeError("tensor division is only supported by scalars")

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# -- backward sweep ------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dp into ``p.grad`` for every reachable leaf ``p``.

    The graph is the set of parent links recorded on forward; it is acyclic by
    construction and each node's closure runs exactly once.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a tensor that is not part of a recorded graph")

    # Iterative post-order topological sort (graphs are deep enough to
    # overflow Python's recursion limit).
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        grad_out = grads.pop(id(node), None)
        if grad_out is None:
            continue
        if node._grad_fn is None:
            # Leaf: accumulate into the public gradient field.
            if node.grad is None:
                node.grad = grad_out.copy()
            else:
                node.grad += grad_out
            continue
        parent_grads = node._grad_fn(grad_out)
        for parent, g in zip(node._parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g


# -- arithmetic ----------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._from_op(data, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor._from_op(data, (a, b), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D matrix product C[i,j] = sum_t A[i,t] * B[t,j]."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2D operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(data, (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2D tensor, got {a.shape}")
    return Tensor._from_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    src = a.data.shape
    return Tensor._from_op(data, (a,), lambda g: (g.reshape(src),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx].copy()

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return Tensor._from_op(data, (a,), grad_fn)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def grad_fn(g):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(splits)

    return Tensor._from_op(data, tuple(parts), grad_fn)


def tsum(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())
    return Tensor._from_op(data, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.asarray(a.data.mean())
    return Tensor._from_op(data, (a,), lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


# -- nonlinearities ------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    """Elementwise max(x, 0); the subgradient at exactly 0 is 0."""
    data = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return Tensor._from_op(data, (a,), lambda g: (g * mask,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    if not np.isfinite(a.data).all():
        raise ContractError("softmax input contains NaN/Inf")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        gy = g * y
        return (gy - y * gy.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(y, (a,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = gamma.data * xhat + beta.data

    def grad_fn(g):
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat
        dbeta = g.sum(axis=reduce_axes) if reduce_axes else g
        return dx, dgamma.reshape(gamma.data.shape), dbeta.reshape(beta.data.shape)

    _ = d
    return Tensor._from_op(y, (x, gamma, beta), grad_fn)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-p).  Callers gate on train mode."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[i] = table[ids[i]]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractError("embedding id out of range")
    data = table.data[ids]

    def grad_fn(g):
        dtable = np.zeros_like(table.data)
        np.add.at(dtable, ids, g)
        return (dtable,)

    return Tensor._from_op(data, (table,), grad_fn)


# -- convolutions and pooling ----------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _im2col_indices(c, h, w, kh, kw, sh, sw, oh, ow):
    """Index arrays that gather (C*kh*kw, oh*ow) patches from a padded image."""
    i0 = np.repeat(np.arange(kh), kw)
    i0 = np.tile(i0, c)
    i1 = sh * np.repeat(np.arange(oh), ow)
    j0 = np.tile(np.arange(kw), kh * c)
    j1 = sw * np.tile(np.arange(ow), oh)
    rows = i0.reshape(-1, 1) + i1.reshape(1, -1)
    cols = j0.reshape(-1, 1) + j1.reshape(1, -1)
    chan = np.repeat(np.arange(c), kh * kw).reshape(-1, 1)
    _ = (h, w)
    return chan, rows, cols


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           stride=1, padding=0) -> Tensor:
    """Cross-correlation of x (C, H, W) with kernels (C_out, C, kh, kw).

    Output spatial size is floor((in + 2*pad - k)/stride) + 1 per axis.
    """
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) and (O,C,kh,kw), got {x.shape}, {kernels.shape}")
    c, h, w = x.data.shape
    c_out, c_in, kh, kw = kernels.data.shape
    if c_in != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {c_in}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1

    xpad = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    chan, rows, cols = _im2col_indices(c, h, w, kh, kw, sh, sw, oh, ow)
    patches = xpad[chan, rows, cols]                     # (C*kh*kw, oh*ow)
    wmat = kernels.data.reshape(c_out, -1)               # (C_out, C*kh*kw)
    out = (wmat @ patches).reshape(c_out, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(c_out, 1, 1)

    def grad_fn(g):
        gmat = g.reshape(c_out, -1)
        dw = (gmat @ patches.T).reshape(kernels.data.shape)
        dpatches = wmat.T @ gmat
        dxpad = np.zeros_like(xpad)
        np.add.at(dxpad, (chan, rows, cols), dpatches)
        dx = dxpad[:, ph:ph + h, pw:pw + w]
        if bias is not None:
            db = gmat.sum(axis=1).reshape(bias.data.shape)
            return dx, dw, db
        return dx, dw

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return Tensor._from_op(out, parents, grad_fn)


def max_pool2d(x: Tensor, window=2, stride=None) -> Tensor:
    """Windowed maximum over (H, W); gradient routes to the first max per window."""
    if x.data.ndim != 3:
        raise ShapeError(f"max_pool2d expects (C,H,W), got {x.shape}")
    wh, ww = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    c, h, w = x.data.shape
    if wh > h or ww > w:
        raise ShapeError(f"pool window {wh}x{ww} larger than input {h}x{w}")
    oh = (h - wh) // sh + 1
    ow = (w - ww) // sw + 1

    # (C, oh, ow, wh*ww) view of the pooling windows.
    ci = np.arange(c).reshape(c, 1, 1, 1)
    hi = (sh * np.arange(oh)).reshape(1, oh, 1, 1) + np.repeat(np.arange(wh), ww).reshape(1, 1, 1, -1)
    wi = (sw * np.arange(ow)).reshape(1, 1, ow, 1) + np.tile(np.arange(ww), wh).reshape(1, 1, 1, -1)
    windows = x.data[ci, hi, wi]
    arg = windows.argmax(axis=-1)        # first occurrence on ties
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        sel_h = np.take_along_axis(np.broadcast_to(hi, windows.shape), arg[..., None], axis=-1)[..., 0]
        sel_w = np.take_along_axis(np.broadcast_to(wi, windows.shape), arg[..., None], axis=-1)[..., 0]
        sel_c = np.broadcast_to(ci[..., 0], arg.shape)
        np.add.at(dx, (sel_c, sel_h, sel_w), g)
        return (dx,)

    return Tensor._from_op(out, (x,), grad_fn)


def causal_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """1D convolution over time with left zero-padding of (width-1) steps.

    x is (T, d_in), kernel is (width, d_in, d_out); output at step t depends
    only on inputs at steps <= t.
    """
    if x.data.ndim != 2 or kernel.data.ndim != 3:
        raise ShapeError(f"causal_conv1d expects (T,d) and (k,d,o), got {x.shape}, {kernel.shape}")
    t, d_in = x.data.shape
    width, kd, d_out = kernel.data.shape
    if kd != d_in:
        raise ShapeError(f"causal_conv1d feature mismatch: input {d_in}, kernel {kd}")
    xpad = np.pad(x.data, ((width - 1, 0), (0, 0)))
    out = np.zeros((t, d_out))
    for j in range(width):
        out += xpad[j:j + t] @ kernel.data[j]
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        dk = np.empty_like(kernel.data)
        dxpad = np.zeros_like(xpad)
        for j in range(width):
            dk[j] = xpad[j:j + t].T @ g
            dxpad[j:j + t] += g @ kernel.data[j].T
        dx = dxpad[width - 1:]
        if bias is not None:
            return dx, dk, g.sum(axis=0).reshape(bias.data.shape)
        return dx, dk

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, parents, grad_fn)
