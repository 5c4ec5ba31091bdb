"""Minimal dense-tensor math with reverse-mode differentiation.

Everything runs on float64 numpy arrays of rank 1..4. The graph is stored
implicitly: each Tensor keeps its parents plus one vector-Jacobian-product
closure per parent, and ``backward`` walks a topological order of that DAG
exactly once. Values are immutable after creation except for ``grad``
accumulation.
"""
from __future__ import annotations

import numpy as np
from dataclasses import dataclass
from typing import Callable, Sequence

from .errors import ConfigError, ContractError, ShapeError

Array = np.ndarray


def _unbroadcast(g: Array, shape: tuple) -> Array:
    # reduce a broadcasted gradient back to the parent's shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} > 4 not supported")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._vjps: tuple = ()

    # --- construction of graph nodes -------------------------------------
    @staticmethod
    def _node(data: Array, parents: Sequence["Tensor"],
              vjps: Sequence[Callable[[Array], Array]]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = np.zeros_like(data) if out.requires_grad else None
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjps = tuple(vjps)
        else:
            out._parents = ()
            out._vjps = ()
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() on non-scalar tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # --- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Populate .grad of every requires_grad ancestor of this scalar."""
        if self.data.size != 1:
            raise ContractError("backward requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # seed and propagate in reverse topological order
        grads: dict[int, Array] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is not None:
                node.grad = node.grad + g
            for p, vjp in zip(node._parents, node._vjps):
                if not p.requires_grad:
                    continue
                contrib = vjp(g)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + contrib
                else:
                    grads[id(p)] = contrib

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad = np.zeros_like(self.data)

    # --- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


# --- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    return Tensor._node(data, (a, b), (
        lambda g: _unbroadcast(g, a.data.shape),
        lambda g: _unbroadcast(g, b.data.shape),
    ))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    return Tensor._node(data, (a, b), (
        lambda g: _unbroadcast(g * b.data, a.data.shape),
        lambda g: _unbroadcast(g * a.data, b.data.shape),
    ))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data
    return Tensor._node(data, (a, b), (
        lambda g: _unbroadcast(g / b.data, a.data.shape),
        lambda g: _unbroadcast(-g * a.data / (b.data ** 2), b.data.shape),
    ))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    return Tensor._node(np.where(mask, x.data, 0.0), (x,),
                        (lambda g: g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # exp may overflow to inf on very negative inputs; the result still
    # saturates to exactly 0, so only the warning is suppressed
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.data))
    return Tensor._node(s, (x,), (lambda g: g * s * (1.0 - s),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return Tensor._node(e, (x,), (lambda g: g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._node(np.log(x.data), (x,), (lambda g: g / x.data,))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.data)
    return Tensor._node(np.abs(x.data), (x,), (lambda g: g * s,))


def power(x, p: float) -> Tensor:
    """x ** p for a fixed real exponent; x must be positive when p is non-integer."""
    x = as_tensor(x)
    data = x.data ** p
    return Tensor._node(data, (x,),
                        (lambda g: g * p * x.data ** (p - 1.0),))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data  # ties route to a; subgradient choice
    data = np.where(take_a, a.data, b.data)
    return Tensor._node(data, (a, b), (
        lambda g: _unbroadcast(g * take_a, a.data.shape),
        lambda g: _unbroadcast(g * ~take_a, b.data.shape),
    ))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    data = np.where(take_a, a.data, b.data)
    return Tensor._node(data, (a, b), (
        lambda g: _unbroadcast(g * take_a, a.data.shape),
        lambda g: _unbroadcast(g * ~take_a, b.data.shape),
    ))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is zero outside (lo, hi)."""
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return Tensor._node(np.clip(x.data, lo, hi), (x,),
                        (lambda g: g * inside,))


# --- structural --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data
    return Tensor._node(data, (a, b), (
        lambda g: g @ b.data.T,
        lambda g: a.data.T @ g,
    ))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("transpose expects rank-2")
    return Tensor._node(x.data.T.copy(), (x,), (lambda g: g.T,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.data.shape
    return Tensor._node(x.data.reshape(shape), (x,),
                        (lambda g: g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    ax = axis % data.ndim
    sizes = [p.data.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * data.ndim
        sl[ax] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return Tensor._node(data, tuple(parts),
                        tuple(make_vjp(i) for i in range(len(parts))))


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; gradient zero-pads back."""
    x = as_tensor(x)
    ax = axis % x.data.ndim
    sl = [slice(None)] * x.data.ndim
    sl[ax] = slice(start, start + length)
    sl = tuple(sl)
    shape = x.data.shape

    def vjp(g):
        full = np.zeros(shape)
        full[sl] = g
        return full

    return Tensor._node(x.data[sl].copy(), (x,), (vjp,))


def take_rows(x, indices) -> Tensor:
    """Row gather (embedding lookup); gradient scatter-adds into the table."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("take_rows expects a rank-2 table")
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.data.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return full

    return Tensor._node(x.data[idx].copy(), (x,), (vjp,))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    if np.ndim(data) == 0:
        data = np.asarray(data).reshape(1)
    shape = x.data.shape

    def vjp(g):
        if axis is None:
            return np.full(shape, float(np.asarray(g).reshape(-1)[0]))
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, shape).copy()

    return Tensor._node(data, (x,), (vjp,))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        n = x.data.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax_rows(x) -> Tensor:
    """Row softmax of a 2-D tensor, computed with max-subtraction."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("softmax_rows expects rank-2")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return y * (g - dot)

    return Tensor._node(y, (x,), (vjp,))


# --- layers -------------------------------------------------------------------

@dataclass
class LinearLayer:
    weight: Tensor  # out x in
    bias: Tensor    # out

    def __post_init__(self):
        if self.weight.data.ndim != 2 or self.bias.data.ndim != 1:
            raise ShapeError("LinearLayer expects 2-D weight and 1-D bias")
        if self.weight.data.shape[0] != self.bias.data.shape[0]:
            raise ShapeError("weight/bias out-size mismatch")

    @property
    def in_size(self) -> int:
        return self.weight.data.shape[1]

    @property
    def out_size(self) -> int:
        return self.weight.data.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.data.shape[-1] != self.in_size:
            raise ShapeError(f"linear in-size {self.in_size} got {x.data.shape}")
        return add(matmul(x, transpose(self.weight)), self.bias)


def init_linear(in_size: int, out_size: int, rng: np.random.Generator) -> LinearLayer:
    bound = 1.0 / np.sqrt(in_size)
    w = Tensor(rng.uniform(-bound, bound, size=(out_size, in_size)), requires_grad=True)
    b = Tensor(rng.uniform(-bound, bound, size=(out_size,)), requires_grad=True)
    return LinearLayer(w, b)


@dataclass
class Mlp3:
    """Three linear layers with ReLU between them, none after the last."""
    l1: LinearLayer
    l2: LinearLayer
    l3: LinearLayer

    def __call__(self, x: Tensor) -> Tensor:
        return self.l3(relu(self.l2(relu(self.l1(x)))))

    def layers(self):
        return (self.l1, self.l2, self.l3)


def init_mlp3(in_size: int, hidden: int, out_size: int,
              rng: np.random.Generator) -> Mlp3:
    return Mlp3(init_linear(in_size, hidden, rng),
                init_linear(hidden, hidden, rng),
                init_linear(hidden, out_size, rng))


def mlp3(x: Tensor, params: Mlp3) -> Tensor:
    return params(x)


@dataclass
class AttentionParams:
    wq: LinearLayer
    wk: LinearLayer
    wv: LinearLayer
    wo: LinearLayer

    def layers(self):
        return (self.wq, self.wk, self.wv, self.wo)


def init_attention(d: int, rng: np.random.Generator) -> AttentionParams:
    return AttentionParams(*(init_linear(d, d, rng) for _ in range(4)))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         params: AttentionParams,
                         return_weights: bool = False):
    """Scaled dot-product attention with per-head column splits.

    q: n_q x d, k/v: n_k x d. Heads are contiguous column blocks of the
    projected tensors, concatenated back before the output projection.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.data.shape[1]
    if d % heads != 0:
        raise ConfigError(f"d={d} not divisible by heads={heads}")
    if k.data.shape[0] < 1:
        raise ShapeError("attention needs at least one key")
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    qp, kp, vp = params.wq(q), params.wk(k), params.wv(v)
    outs = []
    weights = []
    for h in range(heads):
        qh = narrow(qp, 1, h * dh, dh)
        kh = narrow(kp, 1, h * dh, dh)
        vh = narrow(vp, 1, h * dh, dh)
        scores = mul(matmul(qh, transpose(kh)), scale)
        attn = softmax_rows(scores)
        weights.append(attn)
        outs.append(matmul(attn, vh))
    out = params.wo(concat(outs, axis=1))
    if return_weights:
        return out, weights
    return out


# --- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tol: float


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               eps: float = 1e-4, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Relative error per entry is |a - n| / max(1, |a|, |n|); the report
    carries the maximum over entries.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = probe.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        xp = Tensor((flat + bump).reshape(x.data.shape))
        xm = Tensor((flat - bump).reshape(x.data.shape))
        nflat[i] = (f(xp).item() - f(xm).item()) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    return GradCheckReport(max_rel_err=max_rel, passed=max_rel < tol, tol=tol)
