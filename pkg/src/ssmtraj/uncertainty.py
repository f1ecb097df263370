"""Prediction-only extended Kalman filtering and Gaussian likelihoods.

The forecast propagates a mean through the (possibly nonlinear) one-step
transition and a covariance through its Jacobian: P' = F P F^T + Q, with the
covariance starting from zero at the head of the horizon and Q supplied per
step by a learned head.  There is no measurement update; uncertainty only
grows along the forecast.  All computations are per-agent and independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, DivergenceError, NumericsError
from .layers import LinearParams, linear
from .numcore import Tensor, jittered_spd, logdet_psd, softplus, solve_quad, swapaxes
from .numcore.tensor import _as_tensor, _backward_pass, enable_grad

LOG_TWO_PI = float(np.log(2.0 * np.pi))

Q_FLOOR = 1e-6  # keeps the start-of-horizon likelihood nonsingular


@dataclass
class BeliefState:
    mean: Tensor       # (..., d)
    cov: Tensor        # (..., d, d) symmetric PSD
    noise_diag: Tensor  # (..., d) nonnegative process-noise diagonal

    def validate(self) -> None:
        p = self.cov.data
        if np.abs(p - np.swapaxes(p, -1, -2)).max() > 1e-9:
            raise ContractError("covariance is not symmetric within 1e-9")
        if np.linalg.eigvalsh(p).min() < -1e-8:
            raise ContractError("covariance has eigenvalues below -1e-8")
        if np.any(self.noise_diag.data < 0):
            raise ContractError("process noise diagonal must be nonnegative")


def initial_belief(mean, noise_diag) -> BeliefState:
    """Belief at the start of the horizon: covariance is the zero matrix."""
    mean = _as_tensor(mean)
    d = mean.shape[-1]
    cov = Tensor(np.zeros(mean.shape + (d,)))
    return BeliefState(mean, cov, _as_tensor(noise_diag))


def jacobian(transition: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """d(transition)/dx at x, one reverse-mode sweep per output row."""
    x_t = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    with enable_grad():
        y = transition(x_t)
    if y.ndim != 1:
        raise ContractError("transition must map a state vector to a state vector")
    rows = []
    for i in range(y.shape[0]):
        seed = np.zeros_like(y.data)
        seed[i] = 1.0
        grads = _backward_pass(y, seed)
        entry = grads.get(id(x_t))
        rows.append(entry[1] if entry is not None else np.zeros_like(x_t.data))
    f = np.stack(rows, axis=0)
    if not np.all(np.isfinite(f)):
        raise DivergenceError("jacobian contains non-finite entries")
    return f


def jacobian_batch(transition: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Jacobians for a batch of states: (n, d) -> (n, d, d).

    One reverse sweep per output dimension covers the whole batch because
    batch rows are independent in the transition.
    """
    x_t = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    with enable_grad():
        y = transition(x_t)
    n, d = y.shape
    rows = []
    for i in range(d):
        seed = np.zeros_like(y.data)
        seed[:, i] = 1.0
        grads = _backward_pass(y, seed)
        entry = grads.get(id(x_t))
        rows.append(entry[1] if entry is not None else np.zeros_like(x_t.data))
    f = np.stack(rows, axis=1)  # (n, d_out, d_in)
    if not np.all(np.isfinite(f)):
        raise DivergenceError("jacobian contains non-finite entries")
    return f


def ekf_predict(belief: BeliefState, transition: Callable[[Tensor], Tensor],
                f) -> BeliefState:
    """One prediction step: mean through the transition, covariance through F.

    The updated covariance F P F^T + diag(q) is symmetrized; if it still has
    an eigenvalue below -1e-8 the step fails with NumericsError.
    """
    f = _as_tensor(f)
    mean = transition(belief.mean)
    fpf = f @ belief.cov @ f.T
    q = belief.noise_diag
    eye = np.eye(q.shape[-1])
    cov = fpf + q[..., None] * Tensor(eye)
    cov = (cov + swapaxes(cov, -1, -2)) * 0.5
    if np.linalg.eigvalsh(cov.data).min() < -1e-8:
        raise NumericsError("propagated covariance lost positive semidefiniteness")
    return BeliefState(mean, cov, q)


def process_noise(features, head: LinearParams, floor: float = Q_FLOOR) -> Tensor:
    """Strictly positive noise diagonal softplus(W f + b) + floor."""
    return softplus(linear(_as_tensor(features), head)) + floor


def gaussian_nll(x_true, mean, cov) -> Tensor:
    """Negative log density of x_true under N(mean, cov), batched.

    Works on the trailing (d,) / (d, d) axes; for the 2-D position block this
    is 0.5 [(x - mean)^T P^{-1} (x - mean) + log det P + 2 log 2 pi].  The
    covariance gets ladder jitter if needed; a matrix that stays indefinite
    raises DecompositionError.
    """
    x_true, mean, cov = _as_tensor(x_true), _as_tensor(mean), _as_tensor(cov)
    dim = cov.shape[-1]
    cov_pd, _ = jittered_spd(cov)
    err = x_true - mean
    return 0.5 * (solve_quad(cov_pd, err) + logdet_psd(cov_pd) + dim * LOG_TWO_PI)
