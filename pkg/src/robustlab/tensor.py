"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation builds graph nodes whose vector-Jacobian
products are themselves expressed with these same operations, so gradients
can be differentiated again (``backward(..., create_graph=True)``); the
input-gradient-norm penalty in the defense zoo relies on that.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractViolation, DimensionError

_FLOAT_TYPES = (np.float32, np.float64)

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph construction on this thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class _Node:
    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op, inputs, vjp):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    """Dense n-d array participating in the differentiation graph.

    ``data`` is always float32 or float64. ``grad`` is populated by
    :func:`backward` for leaves it was asked about.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None
        self._node: Optional[_Node] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    # arithmetic sugar; the module-level functions do the real work
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

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad_flag})"


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _lift2(a, b):
    if isinstance(a, Tensor):
        return a, _lift(b, like=a)
    return _lift(a, like=b), b


def _apply(op: str, data: np.ndarray, inputs, vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op, tuple(inputs), vjp)
    return out


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.shape != tuple(shape):
        g = reshape(g, tuple(shape))
    return g


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift2(a, b)

    def vjp(g, need):
        ga = _unbroadcast(g, a.shape) if need[0] else None
        gb = _unbroadcast(g, b.shape) if need[1] else None
        return ga, gb

    return _apply("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _lift2(a, b)

    def vjp(g, need):
        ga = _unbroadcast(g, a.shape) if need[0] else None
        gb = _unbroadcast(neg(g), b.shape) if need[1] else None
        return ga, gb

    return _apply("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _lift2(a, b)

    def vjp(g, need):
        ga = _unbroadcast(mul(g, b), a.shape) if need[0] else None
        gb = _unbroadcast(mul(g, a), b.shape) if need[1] else None
        return ga, gb

    return _apply("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _lift2(a, b)

    def vjp(g, need):
        ga = _unbroadcast(div(g, b), a.shape) if need[0] else None
        gb = None
        if need[1]:
            gb = _unbroadcast(mul(g, div(neg(a), mul(b, b))), b.shape)
        return ga, gb

    return _apply("div", a.data / b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = _lift(a)

    def vjp(g, need):
        return (neg(g) if need[0] else None,)

    return _apply("neg", -a.data, (a,), vjp)


def pow_scalar(a, exponent: float) -> Tensor:
    a = _lift(a)
    c = float(exponent)

    def vjp(g, need):
        if not need[0]:
            return (None,)
        return (mul(g, mul(pow_scalar(a, c - 1.0), c)),)

    return _apply("pow", a.data ** c, (a,), vjp)


def log(a) -> Tensor:
    a = _lift(a)

    def vjp(g, need):
        return (div(g, a) if need[0] else None,)

    return _apply("log", np.log(a.data), (a,), vjp)


def exp(a) -> Tensor:
    a = _lift(a)
    holder: list[Tensor] = []

    def vjp(g, need):
        if not need[0]:
            return (None,)
        # the output tensor itself, so differentiating the vjp reaches exp again
        return (mul(g, holder[0]),)

    out = _apply("exp", np.exp(a.data), (a,), vjp)
    holder.append(out)
    return out


def relu(a) -> Tensor:
    a = _lift(a)
    mask = Tensor((a.data > 0).astype(a.dtype))  # grad at exactly 0 is 0

    def vjp(g, need):
        return (mul(g, mask) if need[0] else None,)

    return _apply("relu", np.maximum(a.data, 0), (a,), vjp)


def sign(a) -> Tensor:
    """Elementwise -1/0/+1. Never differentiable: produces no graph node."""
    a = _lift(a)
    return Tensor(np.sign(a.data))


def matmul(a, b) -> Tensor:
    a, b = _lift2(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def vjp(g, need):
        ga = matmul(g, transpose(b)) if need[0] else None
        gb = matmul(transpose(a), g) if need[1] else None
        return ga, gb

    return _apply("matmul", a.data @ b.data, (a, b), vjp)


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def vjp(g, need):
        return (transpose(g, inverse) if need[0] else None,)

    return _apply("transpose", np.transpose(a.data, axes), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    orig = a.shape

    def vjp(g, need):
        return (reshape(g, orig) if need[0] else None,)

    return _apply("reshape", a.data.reshape(shape), (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    orig = a.shape

    def vjp(g, need):
        return (_unbroadcast(g, orig) if need[0] else None,)

    return _apply("broadcast", np.broadcast_to(a.data, shape).copy(), (a,), vjp)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    orig = a.shape

    def vjp(g, need):
        if not need[0]:
            return (None,)
        return (broadcast_to(reshape(g, kept), orig),)

    return _apply("sum", np.sum(a.data, axis=axes, keepdims=keepdims), (a,), vjp)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.shape[axis]
    else:
        count = int(np.prod([a.shape[ax] for ax in axis]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def take_flat(a, flat_index: np.ndarray, out_shape=None, scatter_unique: bool = False) -> Tensor:
    """Gather from the flattened array at integer positions ``flat_index``.

    The adjoint is a scatter-add (:func:`put_flat`); ``scatter_unique`` may be
    set when the caller guarantees the indices never repeat.
    """
    a = _lift(a)
    idx = np.asarray(flat_index)
    data = a.data.reshape(-1)[idx.reshape(-1)]
    shape = tuple(out_shape) if out_shape is not None else idx.shape
    in_shape = a.shape

    def vjp(g, need):
        if not need[0]:
            return (None,)
        return (put_flat(g, idx, in_shape, scatter_unique=scatter_unique),)

    return _apply("take", data.reshape(shape), (a,), vjp)


def put_flat(a, flat_index: np.ndarray, out_shape, scatter_unique: bool = False) -> Tensor:
    """Scatter-add values of ``a`` into a zero array of ``out_shape``."""
    a = _lift(a)
    idx = np.asarray(flat_index).reshape(-1)
    out_shape = tuple(out_shape)
    size = int(np.prod(out_shape))
    flat_vals = a.data.reshape(-1)
    if scatter_unique:
        buf = np.zeros(size, dtype=a.dtype)
        buf[idx] = flat_vals
    else:
        buf = np.bincount(idx, weights=flat_vals.astype(np.float64), minlength=size)
        buf = buf.astype(a.dtype)
    in_shape = a.shape

    def vjp(g, need):
        if not need[0]:
            return (None,)
        return (take_flat(g, idx, in_shape),)

    return _apply("put", buf.reshape(out_shape), (a,), vjp)


# ---------------------------------------------------------------------------
# convolution (lowered to gather + matmul, so its backward composes freely)
# ---------------------------------------------------------------------------

@lru_cache(maxsize=128)
def _pad_interior_index(n, c, h, w, pad):
    hp, wp = h + 2 * pad, w + 2 * pad
    ni, ci, hi, wi = np.ix_(
        np.arange(n), np.arange(c), np.arange(pad, pad + h), np.arange(pad, pad + w)
    )
    idx = ((ni * c + ci) * hp + hi) * wp + wi
    idx = np.ascontiguousarray(idx.reshape(-1))
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=128)
def _im2col_index(n, c, hp, wp, kh, kw, stride):
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    # index layout: (n, oh, ow, c, r, s) -> flat into (n, c, hp, wp)
    ni = np.arange(n).reshape(n, 1, 1, 1, 1, 1)
    ohi = np.arange(ho).reshape(1, ho, 1, 1, 1, 1) * stride
    owi = np.arange(wo).reshape(1, 1, wo, 1, 1, 1) * stride
    ci = np.arange(c).reshape(1, 1, 1, c, 1, 1)
    ri = np.arange(kh).reshape(1, 1, 1, 1, kh, 1)
    si = np.arange(kw).reshape(1, 1, 1, 1, 1, kw)
    idx = ((ni * c + ci) * hp + (ohi + ri)) * wp + (owi + si)
    idx = np.ascontiguousarray(idx.reshape(n * ho * wo, c * kh * kw))
    idx.setflags(write=False)
    return idx


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with FCkhkw kernels."""
    x = _lift(x)
    kernel = _lift(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input/kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(f"kernel expects {ck} input channels, input has {c}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if padding > 0:
        xp = put_flat(x, _pad_interior_index(n, c, h, w, padding), (n, c, hp, wp),
                      scatter_unique=True)
    else:
        xp = x
    cols = take_flat(xp, _im2col_index(n, c, hp, wp, kh, kw, stride),
                     (n * ho * wo, c * kh * kw))
    wmat = transpose(reshape(kernel, (f, c * kh * kw)))
    out = matmul(cols, wmat)
    out = transpose(reshape(out, (n, ho, wo, f)), (0, 3, 1, 2))
    if bias is not None:
        bias = _lift(bias, like=x)
        if bias.shape != (f,):
            raise DimensionError(f"bias shape {bias.shape} != ({f},)")
        out = add(out, reshape(bias, (1, f, 1, 1)))
    return out


# ---------------------------------------------------------------------------
# classification / distribution losses
# ---------------------------------------------------------------------------

def log_softmax(logits) -> Tensor:
    logits = _lift(logits)
    if logits.ndim != 2:
        raise DimensionError(f"log_softmax expects (N, K) logits, got {logits.shape}")
    # the subtracted row max is a constant stabilizer; the value is invariant to it
    row_max = Tensor(np.max(logits.data, axis=1, keepdims=True))
    shifted = sub(logits, row_max)
    lse = log(sum_(exp(shifted), axis=1, keepdims=True))
    return sub(shifted, lse)


def softmax(logits) -> Tensor:
    return exp(log_softmax(logits))


def cross_entropy_per_sample(logits, labels) -> Tensor:
    """Per-sample -log softmax(logits)[label], shape (N,)."""
    logits = _lift(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits)
    picked = take_flat(logp, np.arange(n) * k + labels.astype(np.int64), (n,))
    return neg(picked)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy over the batch (scalar)."""
    return mean_(cross_entropy_per_sample(logits, labels))


def kl_from_logits(logits_p, logits_q) -> Tensor:
    """Batch-mean KL(softmax(logits_p) || softmax(logits_q))."""
    logits_p, logits_q = _lift(logits_p), _lift(logits_q)
    logp = log_softmax(logits_p)
    logq = log_softmax(logits_q)
    p = exp(logp)
    per_row = sum_(mul(p, sub(logp, logq)), axis=1)
    return mean_(per_row)


def kl_div(p, q) -> Tensor:
    """Batch-mean KL between probability rows, with the 0*log(0) = 0 convention."""
    p, q = _lift(p), _lift(q)
    if p.ndim == 1:
        p = reshape(p, (1, p.size))
        q = reshape(q, (1, q.size))
    mask = Tensor((p.data > 0).astype(p.dtype))
    safe_p = add(mul(p, mask), sub(Tensor(np.ones_like(mask.data)), mask))
    per_row = sum_(mul(mul(p, mask), sub(log(safe_p), log(q))), axis=1)
    return mean_(per_row)


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Scale rows to unit L2 norm. Zero rows violate the contract."""
    a = _lift(a)
    axis = axis % a.ndim
    norms_sq = np.sum(a.data * a.data, axis=axis)
    if np.any(norms_sq == 0):
        raise ContractViolation("cannot L2-normalize a zero vector")
    norm = pow_scalar(sum_(mul(a, a), axis=axis, keepdims=True), 0.5)
    return div(a, broadcast_to(norm, a.shape))


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    return sum_(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for inp in t._node.inputs:
                if id(inp) not in visited:
                    stack.append((inp, False))
    return order  # inputs before consumers


def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None,
             create_graph: bool = False) -> dict:
    """Reverse-mode gradients of a scalar ``loss``.

    Returns a map from each requested leaf (all ``requires_grad`` leaves when
    ``wrt`` is None) to its gradient tensor; leaves the loss does not reach get
    zeros. Also accumulates into each returned leaf's ``.grad``. With
    ``create_graph`` the returned gradients carry their own graph and can be
    differentiated again.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward expects a scalar loss, got shape {loss.shape}")

    order = _toposort(loss)
    wrt_list = list(wrt) if wrt is not None else None
    if wrt_list is None:
        wrt_list = [t for t in order if t.requires_grad and t._node is None]
    wrt_ids = {id(t) for t in wrt_list}

    # mark tensors that can reach a requested leaf (inputs precede consumers)
    needed = set()
    for t in order:
        if id(t) in wrt_ids:
            needed.add(id(t))
        elif t._node is not None and any(id(i) in needed for i in t._node.inputs):
            needed.add(id(t))

    grads: dict[int, Tensor] = {}
    if id(loss) in needed:
        grads[id(loss)] = Tensor(np.ones(loss.shape, dtype=loss.dtype))

    ctx = _NullCtx() if create_graph else no_grad()
    with ctx:
        for t in reversed(order):
            if t._node is None:
                continue  # leaf: keep its accumulated grad for collection below
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            need = tuple(id(i) in needed for i in node.inputs)
            input_grads = node.vjp(g, need)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else add(prev, gi)

    result = {}
    for t in wrt_list:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape, dtype=t.dtype))
        result[t] = g
        t.grad = g if t.grad is None else Tensor(t.grad.data + g.data)
    return result


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class FiniteDifferenceReport:
    passed: bool
    max_rel_error: float
    worst_index: tuple = ()
    tol: float = 1e-4
    rel_errors: np.ndarray = field(default=None, repr=False)

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"finite-difference check: {status} "
                f"(max rel err {self.max_rel_error:.3e} at {self.worst_index}, tol {self.tol:g})")


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            h: float = 1e-5, tol: float = 1e-4) -> FiniteDifferenceReport:
    """Compare ``backward`` gradients of ``f`` against central differences.

    ``f`` maps a tensor to a scalar tensor. Reports instead of raising; the
    relative error denominator is floored at 1e-6 so exactly-zero gradient
    coordinates compare on an absolute scale.
    """
    leaf = Tensor(np.array(x.data, dtype=np.float64, copy=True), requires_grad=True)
    analytic = backward(f(leaf), wrt=[leaf])[leaf].data

    numeric = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(Tensor(leaf.data, requires_grad=True)).item()
        flat[i] = orig - h
        f_minus = f(Tensor(leaf.data, requires_grad=True)).item()
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    return FiniteDifferenceReport(
        passed=bool(np.all(rel < tol)),
        max_rel_error=float(rel.reshape(-1)[worst]),
        worst_index=np.unravel_index(worst, rel.shape),
        tol=tol,
        rel_errors=rel,
    )
