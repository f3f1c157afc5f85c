"""Dense tensors with reverse-mode automatic differentiation.

A small numpy-backed autodiff core. Every op records a closure mapping the
output gradient to parent gradients; :meth:`Tensor.backward` walks the graph
in reverse topological order. Broadcasting is limited to scalar<->tensor and
equal shapes; the few ops that need a row-vector broadcast (bias, layer norm
gain) do it internally.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

NEG_LARGE = -1e30

Number = Union[int, float]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised as soon as an op produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str,
              allow_nonfinite: bool = False) -> "Tensor":
        if not allow_nonfinite and not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite value produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- backprop ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` (requiring grad), root first, parents after children."""
    order: list = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        for p in parents:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                break
        else:
            stack.pop()
            order.append(node)
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary_operands(a, b):
    a = as_tensor(a)
    if isinstance(b, Tensor):
        if a.shape == b.shape or b.data.size == 1 and b.ndim == 0 or a.data.size == 1 and a.ndim == 0:
            return a, b
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")
    return a, None


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, bt = _binary_operands(a, b)
    if bt is None:
        c = b
        return Tensor._make(a.data + c, (a,), lambda g: (g,), "add")
    return Tensor._make(a.data + bt.data, (a, bt),
                        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, bt.shape)), "add")


def sub(a, b) -> Tensor:
    a, bt = _binary_operands(a, b)
    if bt is None:
        c = b
        return Tensor._make(a.data - c, (a,), lambda g: (g,), "sub")
    return Tensor._make(a.data - bt.data, (a, bt),
                        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, bt.shape)), "sub")


def mul(a, b) -> Tensor:
    a, bt = _binary_operands(a, b)
    if bt is None:
        return scale(a, b)
    ad, bd = a.data, bt.data
    return Tensor._make(ad * bd, (a, bt),
                        lambda g: (_reduce_to(g * bd, a.shape), _reduce_to(g * ad, bt.shape)), "mul")


def scale(a: Tensor, c: Number) -> Tensor:
    c = float(c)
    return Tensor._make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor._make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def swish(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return Tensor._make(x * s, (a,), lambda g: (g * (s + x * s * (1 - s)),), "swish")


def relu(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._make(np.maximum(x, 0), (a,), lambda g: (g * (x > 0),), "relu")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return Tensor._make(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    if (x <= 0).any():
        raise ValueError("log of non-positive value")
    return Tensor._make(np.log(x), (a,), lambda g: (g / x,), "log")


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, sigmoid, swish, relu, exp, log."""
    table = {"add": add, "sub": sub, "mul": mul, "scale": scale, "sigmoid": sigmoid,
             "swish": swish, "relu": relu, "exp": exp, "log": log}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._make(np.asarray(a.data.sum()), (a,),
                        lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(tsum(a), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a shared 2-D matrix or
    has exactly the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._make(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with the bias broadcast over all leading axes."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear dimension mismatch: {x.shape} @ {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, wd.shape[1])

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def _dead_rows(additive_mask: np.ndarray) -> np.ndarray:
    return (additive_mask <= NEG_LARGE / 2).all(axis=-1, keepdims=True)


def softmax(x: Tensor, additive_mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis.

    ``additive_mask`` holds 0 (allowed) or ``NEG_LARGE`` (masked) per entry and
    must match ``x`` in shape. Rows with no allowed entry come out as exact zeros.
    """
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    z = x.data
    dead = None
    if additive_mask is not None:
        m = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask)
        if m.shape != z.shape:
            raise ShapeError(f"mask shape {m.shape} does not match logits {z.shape}")
        z = z + m.astype(z.dtype, copy=False)
        dead = _dead_rows(m)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    if dead is not None and dead.any():
        p = np.where(dead, 0, p).astype(p.dtype, copy=False)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._make(p, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(out, (x,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# normalisation / gating / convolution
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, n)
        ggamma = (lead * xhat.reshape(-1, n)).sum(axis=0)
        gbeta = lead.sum(axis=0)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward, "layer_norm")


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half * sigmoid(second half)."""
    c = x.shape[-1]
    if c % 2:
        raise ShapeError(f"glu needs an even last dim, got {c}")
    h = c // 2
    a, b = x.data[..., :h], x.data[..., h:]
    s = _sigmoid(b)

    def backward(g):
        return (np.concatenate([g * s, g * a * s * (1 - s)], axis=-1),)

    return Tensor._make(a * s, (x,), backward, "glu")


def depthwise_conv1d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-length depthwise convolution along time with symmetric zero padding.

    ``x`` is (..., T, C), ``kernel`` is (K, C) with K odd.
    """
    K, C = kernel.shape
    if K % 2 == 0:
        raise ShapeError(f"depthwise kernel length must be odd, got {K}")
    if x.shape[-1] != C:
        raise ShapeError(f"channel mismatch: {x.shape} vs kernel {kernel.shape}")
    pad = K // 2
    xd, kd = x.data, kernel.data
    T = xd.shape[-2]
    widths = [(0, 0)] * (xd.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(xd, widths)
    out = np.zeros_like(xd)
    for k in range(K):
        out += xp[..., k:k + T, :] * kd[k]
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = gk = gb = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for k in range(K):
                gp[..., k:k + T, :] += g * kd[k]
            gx = gp[..., pad:pad + T, :]
        if kernel.requires_grad:
            gk = np.stack([(xp[..., k:k + T, :] * g).reshape(-1, C).sum(axis=0) for k in range(K)])
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, C).sum(axis=0)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._make(out, parents, backward, "depthwise_conv1d")


def unfold_frames(x: Tensor, kernel: int, stride: int, pad: int) -> Tensor:
    """Stack ``kernel`` neighbouring frames (zero padded) into one row per output step.

    (..., T, C) -> (..., T_out, kernel*C) with T_out = (T + 2*pad - kernel)//stride + 1.
    """
    xd = x.data
    T, C = xd.shape[-2], xd.shape[-1]
    t_out = (T + 2 * pad - kernel) // stride + 1
    if t_out < 1:
        raise ShapeError(f"sequence of length {T} too short for kernel {kernel}")
    widths = [(0, 0)] * (xd.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(xd, widths)
    span = stride * (t_out - 1) + 1
    cols = [xp[..., k:k + span:stride, :] for k in range(kernel)]
    out = np.concatenate(cols, axis=-1)

    def backward(g):
        gp = np.zeros_like(xp)
        for k in range(kernel):
            gp[..., k:k + span:stride, :] += g[..., k * C:(k + 1) * C]
        return (gp[..., pad:pad + T, :],)

    return Tensor._make(out, (x,), backward, "unfold_frames")


# ---------------------------------------------------------------------------
# row selection
# ---------------------------------------------------------------------------

def _check_sorted_indices(indices: np.ndarray, n: int) -> None:
    if indices.ndim != 1:
        raise ShapeError("index list must be one-dimensional")
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise IndexError(f"row index out of range for length {n}: {indices.tolist()}")
    if indices.size > 1 and (np.diff(indices) <= 0).any():
        raise ValueError(f"row indices must be strictly increasing: {indices.tolist()}")


def gather_rows(x: Tensor, indices: Iterable[int]) -> Tensor:
    """Select rows of a (T, d) tensor; backward scatters into the selected rows."""
    idx = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices, dtype=np.int64)
    _check_sorted_indices(idx, x.shape[0])
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return Tensor._make(x.data[idx], (x,), backward, "gather_rows")


def gather_frames(x: Tensor, index: np.ndarray) -> Tensor:
    """Batched row gather: ``x`` (B, T, d), ``index`` (B, T') with -1 marking padding.

    Padding slots come out as zeros and receive no gradient.
    """
    B, T, d = x.shape
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2 or index.shape[0] != B:
        raise ShapeError(f"index shape {index.shape} incompatible with {x.shape}")
    if index.size and index.max() >= T:
        raise IndexError("frame index out of range")
    valid = index >= 0
    rows = np.arange(B)[:, None]
    safe = np.where(valid, index, 0)
    out = x.data[rows, safe] * valid[..., None]
    out = out.astype(x.dtype, copy=False)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        b_idx = np.broadcast_to(rows, index.shape)[valid]
        np.add.at(gx, (b_idx, index[valid]), g[valid])
        return (gx,)

    return Tensor._make(out, (x,), backward, "gather_frames")


def mask_frames(x: Tensor, keep: np.ndarray) -> Tensor:
    """Zero the frames of ``x`` (..., T, d) where ``keep`` (..., T) is false."""
    k = np.asarray(keep, dtype=x.dtype)[..., None]
    return Tensor._make(x.data * k, (x,), lambda g: (g * k,), "mask_frames")
