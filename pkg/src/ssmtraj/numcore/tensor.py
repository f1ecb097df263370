"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that combines tracked tensors records a node holding its
operands and a closure that maps the output gradient to operand gradients.
``Tensor.backward`` walks the recorded DAG once, in reverse topological
order, and accumulates ``d(loss)/d(tensor)`` into ``.grad`` of every tracked
tensor; repeated calls accumulate until ``zero_grad``.

Data is NumPy float64 throughout.  Tensors are immutable once created (the
only mutation is gradient accumulation), so one computation graph belongs to
one worker and finished tensors can be shared freely by value.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError

_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class enable_grad:
    """Context manager that forces tape recording back on (for derivative
    computations nested inside evaluation-only code)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = True
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # ------------------------------------------------------------------
    # introspection
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
    def T(self):
        """Matrix transpose (swaps the trailing two axes)."""
        return swapaxes(self, -1, -2)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._item_err()

    def _item_err(self):
        raise ContractError("item() requires a single-element tensor")

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # ------------------------------------------------------------------
    # autodiff
    def backward(self):
        """Accumulate d(self)/d(tensor) into .grad over the recorded graph."""
        if self.size != 1:
            raise ContractError("backward requires a scalar loss tensor")
        grads = _backward_pass(self, np.ones_like(self.data))
        for node, g in grads.values():
            node.grad = g if node.grad is None else node.grad + g

    # ------------------------------------------------------------------
    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # method forms of common functions
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, recording the tape node when tracking is on."""
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _backward_pass(root: Tensor, seed: np.ndarray) -> dict:
    """Pure reverse sweep: returns {id: (tensor, grad)} without touching .grad."""
    # iterative DFS with gray/black marking; a gray revisit is a cycle
    topo: list[Tensor] = []
    state: dict[int, int] = {}
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        nid = id(node)
        if expanded:
            state[nid] = 2
            topo.append(node)
            continue
        st = state.get(nid, 0)
        if st == 2:
            continue
        if st == 1:
            raise ContractError("cycle detected in computation graph")
        state[nid] = 1
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and state.get(id(p), 0) != 2:
                stack.append((p, False))

    pending: dict[int, np.ndarray] = {id(root): seed}
    out: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(topo):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        out[id(node)] = (node, g)
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pid = id(p)
            prev = pending.get(pid)
            pending[pid] = pg if prev is None else prev + pg
    return out


def grad_of(root: Tensor, leaves: Iterable[Tensor], seed: np.ndarray | None = None):
    """One-shot gradients of ``root`` w.r.t. ``leaves`` without mutating .grad."""
    if seed is None:
        seed = np.ones_like(root.data)
    grads = _backward_pass(root, np.asarray(seed, dtype=np.float64))
    return [grads[id(l)][1] if id(l) in grads else np.zeros_like(l.data) for l in leaves]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape of the broadcast operand."""
    if g.shape == shape:
        return g
    nd = len(shape)
    while g.ndim > nd:
        g = g.sum(axis=0)
    axes = tuple(i for i in range(nd) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _result(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _result(out, (a, b), bwd)


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    c = float(exponent)
    out = a.data**c

    def bwd(g):
        return (g * c * a.data ** (c - 1.0),)

    return _result(out, (a,), bwd)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return _result(out, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _result(out, (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _result(out, (a,), bwd)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _result(out, (a,), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), bwd)


def softplus(a) -> Tensor:
    """log(1 + e^x), stable for large |x|; derivative is the sigmoid."""
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def bwd(g):
        return (g * _sigmoid(a.data),)

    return _result(out, (a,), bwd)


def silu(a) -> Tensor:
    """x * sigmoid(x); preserves zero input exactly."""
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s

    def bwd(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _result(out, (a,), bwd)


def leaky_relu(a, negative_slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    slope = float(negative_slope)
    out = np.where(a.data > 0, a.data, slope * a.data)

    def bwd(g):
        return (g * np.where(a.data > 0, 1.0, slope),)

    return _result(out, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _result(out, (a,), bwd)


def expm1_over_x(a) -> Tensor:
    """(e^x - 1) / x with the series limit 1 at x = 0.

    The forward value is accurate for any x via expm1; the derivative
    (e^x (x - 1) + 1) / x^2 cancels catastrophically near zero, so it
    switches to a truncated series below |x| = 1e-4.
    """
    a = _as_tensor(a)
    x = a.data
    safe = np.where(x == 0.0, 1.0, x)
    out = np.where(x == 0.0, 1.0, np.expm1(x) / safe)

    def bwd(g):
        small = np.abs(x) < 1e-4
        series = 0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0
        denom = np.where(small, 1.0, x)
        exact = (np.exp(x) * (x - 1.0) + 1.0) / (denom * denom)
        return (g * np.where(small, series, exact),)

    return _result(out, (a,), bwd)


# ----------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return _result(out, (a,), bwd)


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = _as_tensor(a)
    out = np.swapaxes(a.data, axis1, axis2)

    def bwd(g):
        return (np.swapaxes(g, axis1, axis2),)

    return _result(out, (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def bwd(g):
        return (g.transpose(inverse),)

    return _result(out, (a,), bwd)


def getitem(a, idx) -> Tensor:
    """Basic (slice/int/ellipsis) indexing; use gather() for index arrays."""
    a = _as_tensor(a)
    out = a.data[idx]

    def bwd(g):
        gz = np.zeros_like(a.data)
        gz[idx] += g
        return (gz,)

    return _result(out, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result(out, tensors, bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        pieces = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in pieces)

    return _result(out, tensors, bwd)


def gather(a, indices, axis: int = 0) -> Tensor:
    """Row gather along axis 0 by an integer index array (repeats allowed)."""
    if axis != 0:
        raise ContractError("gather supports axis 0 only")
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def bwd(g):
        gz = np.zeros_like(a.data)
        np.add.at(gz, idx, g)
        return (gz,)

    return _result(out, (a,), bwd)


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets along axis 0.

    Accumulation follows the row order of ``a``, so callers that need
    bit-reproducible sums must fix that order themselves.
    """
    a = _as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.int64)
    out = np.zeros((num_segments,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(out, seg, a.data)

    def bwd(g):
        return (g[seg],)

    return _result(out, (a,), bwd)


# ----------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _result(out, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def l2norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along an axis with a zero-safe gradient."""
    a = _as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        n = out if keepdims else np.expand_dims(out, axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * a.data / np.maximum(n, 1e-300),)

    return _result(out, (a,), bwd)


# ----------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """NumPy-semantics matmul for 1-D and stacked >= 2-D operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    a_vec = a.data.ndim == 1
    b_vec = b.data.ndim == 1
    ad = a.data[None, :] if a_vec else a.data
    bd = b.data[:, None] if b_vec else b.data
    out = ad @ bd
    if b_vec:
        out = out[..., 0]
    if a_vec:
        out = out[..., 0, :] if not b_vec else out[..., 0]

    def bwd(g):
        g2 = g
        if a_vec and b_vec:
            g2 = np.asarray(g)[..., None, None]
        elif a_vec:
            g2 = np.expand_dims(g, -2)
        elif b_vec:
            g2 = np.expand_dims(g, -1)
        ga = g2 @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g2
        ga = _unbroadcast(ga, ad.shape)
        gb = _unbroadcast(gb, bd.shape)
        if a_vec:
            ga = ga[0]
        if b_vec:
            gb = gb[:, 0]
        return ga, gb

    return _result(out, (a, b), bwd)


def solve_quad(p, e) -> Tensor:
    """Quadratic form e^T P^{-1} e over the trailing matrix/vector axes.

    P: (..., d, d) nonsingular, e: (..., d); returns (...,).  Gradients use
    the closed forms d/de = P^{-T} e + P^{-1} e and d/dP = -(P^{-T} e)(P^{-1} e)^T,
    exact for the computed solve.
    """
    p, e = _as_tensor(p), _as_tensor(e)
    s = np.linalg.solve(p.data, e.data[..., None])[..., 0]
    out = (e.data * s).sum(axis=-1)

    def bwd(g):
        st = np.linalg.solve(np.swapaxes(p.data, -1, -2), e.data[..., None])[..., 0]
        gg = np.asarray(g)[..., None]
        ge = gg * (s + st)
        gp = -(np.asarray(g)[..., None, None]) * (st[..., :, None] * s[..., None, :])
        return _unbroadcast(gp, p.data.shape), _unbroadcast(ge, e.data.shape)

    return _result(out, (p, e), bwd)


def logdet_psd(p) -> Tensor:
    """log-determinant of symmetric positive-definite (..., d, d) matrices.

    Computed via Cholesky; gradient is P^{-1} (exact for symmetric input).
    Raises np.linalg.LinAlgError if any matrix is not PD; callers own jitter.
    """
    p = _as_tensor(p)
    chol = np.linalg.cholesky(p.data)
    diag = np.diagonal(chol, axis1=-2, axis2=-1)
    out = 2.0 * np.log(diag).sum(axis=-1)

    def bwd(g):
        inv = np.linalg.inv(p.data)
        return (np.asarray(g)[..., None, None] * inv,)

    return _result(out, (p,), bwd)
