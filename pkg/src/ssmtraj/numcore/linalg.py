"""Matrix functions on tensors: exponential and Cholesky log-determinant."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, DecompositionError, DivergenceError
from .tensor import Tensor, _as_tensor, concat, logdet_psd, matmul

# jitter ladder tried before declaring a decomposition failure
_JITTERS = (0.0, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5)

_TAYLOR_TERMS = 17


def matexp(m) -> Tensor:
    """Matrix exponential by scaling-and-squaring with a truncated series.

    The argument is scaled so its 1-norm is at most 1/2, the series is summed
    to a fixed order, and the result is squared back up.  Relative error is
    far below 1e-10 for norms up to 10, and gradients flow through the
    series and squaring steps, so they are exact for the computed value.
    """
    m = _as_tensor(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractError(f"matexp requires a square matrix, got {m.shape}")
    if not np.all(np.isfinite(m.data)):
        raise ContractError("matexp requires finite entries")
    n = m.shape[0]
    norm = float(np.abs(m.data).sum(axis=0).max()) if n else 0.0
    squarings = max(0, int(np.ceil(np.log2(norm / 0.5))) if norm > 0.5 else 0)
    t = m * (1.0 / 2.0**squarings)

    acc = Tensor(np.eye(n)) + t
    term = t
    for k in range(2, _TAYLOR_TERMS + 1):
        term = matmul(term, t) * (1.0 / k)
        acc = acc + term
    for _ in range(squarings):
        acc = matmul(acc, acc)
    if not np.all(np.isfinite(acc.data)):
        raise DivergenceError("matexp produced non-finite values")
    return acc


def cholesky_logdet(p) -> tuple[Tensor, Tensor]:
    """Cholesky factor and log-determinant of a symmetric PD matrix.

    Symmetry is required within 1e-9.  If the matrix is not positive
    definite, increasing diagonal jitter (1e-9 up to 1e-5) is added before
    giving up with DecompositionError.  The returned factor satisfies
    L L^T = P + jitter*I and is not gradient-tracked; the log-determinant is
    tracked with the exact gradient P^{-1} of the jittered matrix.
    """
    p = _as_tensor(p)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ContractError(f"cholesky_logdet requires a square matrix, got {p.shape}")
    asym = float(np.abs(p.data - p.data.T).max()) if p.size else 0.0
    if asym > 1e-9:
        raise ContractError(f"matrix is not symmetric within 1e-9 (max skew {asym:.3e})")
    n = p.shape[0]
    for jitter in _JITTERS:
        pj = p if jitter == 0.0 else p + Tensor(jitter * np.eye(n))
        try:
            factor = np.linalg.cholesky(pj.data)
        except np.linalg.LinAlgError:
            continue
        return Tensor(factor), logdet_psd(pj)
    raise DecompositionError(
        f"matrix not positive definite after jitter up to {_JITTERS[-1]:g}"
    )


def jittered_spd(p, batched: bool = True):
    """Smallest ladder jitter making (each) matrix Cholesky-factorable.

    Returns (tensor with jitter*I added, jitter).  Used by likelihood code
    that needs a differentiable PD matrix rather than the factor itself.
    """
    p = _as_tensor(p)
    n = p.shape[-1]
    eye = np.eye(n)
    for jitter in _JITTERS:
        pj = p if jitter == 0.0 else p + Tensor(jitter * eye)
        try:
            np.linalg.cholesky(pj.data)
        except np.linalg.LinAlgError:
            continue
        return pj, jitter
    raise DecompositionError(
        f"matrix not positive definite after jitter up to {_JITTERS[-1]:g}"
    )


def zoh_pair(a, b, delta: float) -> tuple[Tensor, Tensor]:
    """Exact zero-order-hold pair via one augmented matrix exponential.

    exp(delta * [[A, B], [0, 0]]) = [[Abar, Bbar], [0, I]], which handles
    singular A (including A = 0) without a separate series branch.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if delta <= 0:
        raise ContractError("discretization step must be positive")
    d = a.shape[0]
    du = b.shape[1]
    top = concat([a, b], axis=1)
    bottom = Tensor(np.zeros((du, d + du)))
    aug = concat([top, bottom], axis=0) * float(delta)
    e = matexp(aug)
    return e[:d, :d], e[:d, d:]
