"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything the attention blocks need lives here: batched matmul, elementwise
arithmetic, shape moves, masked softmax/mean, layer norm, GELU, and the node
gather/scatter that lays tensors out per subgraph. All data is 64-bit and
row-major. matmul feeds a global FLOP counter when counting is enabled.

Gradients are first-order only. Calling backward() again without resetting
grads accumulates, matching the usual optimizer contract.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ContractError, DegenerateMaskError, NumericError, ShapeError

_DEBUG_CHECKS = True
_GRAD_ENABLED = True


def set_debug_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf detection after every op. Returns the previous setting."""
    global _DEBUG_CHECKS
    previous = _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)
    return previous


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording the tape."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class FlopCounter:
    """Counts multiplies/adds issued by matmul while enabled.

    Disabled counting leaves results bit-identical; the counter only ever
    observes, never alters, the arithmetic.
    """

    def __init__(self):
        self.mults = 0
        self.adds = 0
        self.enabled = False

    def reset(self):
        self.mults = 0
        self.adds = 0

    def count_matmul(self, batch: int, m: int, k: int, n: int):
        self.mults += batch * m * n * k
        self.adds += batch * m * n * (k - 1)

    def total(self) -> int:
        return self.mults + self.adds

    def report(self) -> dict:
        return {"mults": self.mults, "adds": self.adds, "total": self.total()}

    @contextlib.contextmanager
    def counting(self):
        previous = self.enabled
        self.enabled = True
        try:
            yield self
        finally:
            self.enabled = previous


flops = FlopCounter()


class Tensor:
    """A float64 ndarray plus optional gradient and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are accepted on either side
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self):
        """Populate grad with dself/dtensor for every tensor on the tape.

        The root must be a scalar. Propagation runs on a per-call grad map so
        that repeated calls accumulate exactly one contribution each.
        """
        if self.data.shape != ():
            raise ContractError(
                f"backward root must be a scalar, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            raise ContractError("backward root does not depend on any gradient tensor")
        order = _toposort(self)
        local = {id(self): np.asarray(1.0)}
        for node in reversed(order):
            g = local.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in local:
                    local[key] = local[key] + pg
                else:
                    local[key] = pg
        for node in order:
            g = local.get(id(node))
            if g is not None:
                g = np.asarray(g, dtype=np.float64)
                node.grad = g.copy() if node.grad is None else node.grad + g


def _toposort(root: Tensor) -> list:
    """Iterative DFS, parents before children (tapes outgrow the recursion limit)."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(data: np.ndarray, op: str) -> np.ndarray:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    return data


def _from_op(data, op, parents, backward) -> Tensor:
    _finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _from_op(data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _from_op(data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _from_op(data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _from_op(data, "div", (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy-style leading batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs 2-D or higher operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner extents disagree: {a.data.shape} x {b.data.shape}"
        )
    data = np.matmul(a.data, b.data)
    if flops.enabled:
        m, k = a.data.shape[-2], a.data.shape[-1]
        n = b.data.shape[-1]
        batch = int(np.prod(data.shape[:-2], dtype=np.int64)) if data.ndim > 2 else 1
        flops.count_matmul(batch, m, k, n)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return _from_op(data, "matmul", (a, b), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return _from_op(data, "reshape", (x,), backward)


def swapaxes(x, axis1: int, axis2: int) -> Tensor:
    x = as_tensor(x)
    data = np.swapaxes(x.data, axis1, axis2)

    def backward(g):
        return (np.swapaxes(g, axis1, axis2),)

    return _from_op(data, "swapaxes", (x,), backward)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    data = np.broadcast_to(x.data, shape)

    def backward(g):
        return (_unbroadcast(g, x.data.shape),)

    return _from_op(data, "broadcast_to", (x,), backward)


def concat(parts, axis: int = -1) -> Tensor:
    ts = [as_tensor(p) for p in parts]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def backward(g):
        return tuple(np.split(g, np.cumsum(sizes[:-1]), axis=axis))

    return _from_op(data, "concat", tuple(ts), backward)


def masked_softmax(logits, valid=None) -> Tensor:
    """Softmax over the last axis restricted to positions where valid is True.

    Masked positions come out exactly 0 and each row of survivors sums to 1;
    stabilization subtracts the row max over unmasked entries only, so masked
    values never influence the result. valid may be a length-n vector or any
    boolean array broadcastable to the logits' shape; None means no mask.
    """
    x = as_tensor(logits)
    if valid is None:
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        vb = np.broadcast_to(np.asarray(valid, dtype=bool), x.data.shape)
        if not vb.any(axis=-1).all():
            raise DegenerateMaskError("masked_softmax: a row has every entry masked")
        mx = np.max(np.where(vb, x.data, -np.inf), axis=-1, keepdims=True)
        e = np.where(vb, np.exp(np.where(vb, x.data - mx, 0.0)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _from_op(y, "masked_softmax", (x,), backward)


def masked_mean(x, valid) -> Tensor:
    """Mean over axis -2 counting only rows flagged valid.

    x has shape (..., m, d); valid broadcasts to (..., m). Rows with
    valid == False contribute exactly zero.
    """
    t = as_tensor(x)
    vb = np.broadcast_to(np.asarray(valid, dtype=bool), t.data.shape[:-1])
    cnt = vb.sum(axis=-1)
    if (cnt == 0).any():
        raise DegenerateMaskError("masked_mean: a subgraph has no valid rows")
    w = vb[..., None].astype(np.float64)
    data = (t.data * w).sum(axis=-2) / cnt[..., None]

    def backward(g):
        return (w * (g[..., None, :] / cnt[..., None, None]),)

    return _from_op(data, "masked_mean", (t,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then scale and shift."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    t, ga, be = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = t.data.mean(axis=-1, keepdims=True)
    xc = t.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = ga.data * xhat + be.data

    def backward(g):
        gy = g * ga.data
        gx = inv * (
            gy
            - gy.mean(axis=-1, keepdims=True)
            - xhat * (gy * xhat).mean(axis=-1, keepdims=True)
        )
        g_gamma = _unbroadcast(g * xhat, ga.data.shape) if ga.requires_grad else None
        g_beta = _unbroadcast(g, be.data.shape) if be.requires_grad else None
        return gx, g_gamma, g_beta

    return _from_op(data, "layer_norm", (t, ga, be), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """x * Phi(x) via the tanh approximation."""
    t = as_tensor(x)
    u = _GELU_C * (t.data + 0.044715 * t.data**3)
    th = np.tanh(u)
    data = 0.5 * t.data * (1.0 + th)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * t.data**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * t.data * (1.0 - th * th) * du),)

    return _from_op(data, "gelu", (t,), backward)


def tensor_sum(x) -> Tensor:
    t = as_tensor(x)
    data = t.data.sum()

    def backward(g):
        return (np.broadcast_to(g, t.data.shape),)

    return _from_op(data, "sum", (t,), backward)


def tensor_mean(x) -> Tensor:
    t = as_tensor(x)
    data = t.data.mean()

    def backward(g):
        return (np.broadcast_to(g / t.data.size, t.data.shape),)

    return _from_op(data, "mean", (t,), backward)


def tensor_abs(x) -> Tensor:
    t = as_tensor(x)
    data = np.abs(t.data)

    def backward(g):
        return (g * np.sign(t.data),)

    return _from_op(data, "abs", (t,), backward)


def gather_nodes(x, index, valid) -> Tensor:
    """Lay node rows (..., n, d) out as (..., p, m, d) slots.

    index is the p-by-m gather table (node ids, -1 on padding) and valid the
    matching boolean table. Padded slots are exact zeros. Each node id must
    appear exactly once across the table, which makes the scatter in the
    backward pass collision-free.
    """
    t = as_tensor(x)
    index = np.asarray(index)
    valid = np.asarray(valid, dtype=bool)
    nodes = index[valid]
    data = np.take(t.data, np.where(valid, index, 0), axis=-2)
    data = np.where(valid[..., None], data, 0.0)

    def backward(g):
        gx = np.zeros_like(t.data)
        gx[..., nodes, :] = g[..., valid, :]
        return (gx,)

    return _from_op(data, "gather_nodes", (t,), backward)


def scatter_nodes(y, index, valid, n: int) -> Tensor:
    """Inverse of gather_nodes: (..., p, m, d) back to (..., n, d), padding dropped."""
    t = as_tensor(y)
    index = np.asarray(index)
    valid = np.asarray(valid, dtype=bool)
    nodes = index[valid]
    data = np.zeros(t.data.shape[:-3] + (n, t.data.shape[-1]))
    data[..., nodes, :] = t.data[..., valid, :]

    def backward(g):
        gy = np.zeros_like(t.data)
        gy[..., valid, :] = g[..., nodes, :]
        return (gy,)

    return _from_op(data, "scatter_nodes", (t,), backward)
