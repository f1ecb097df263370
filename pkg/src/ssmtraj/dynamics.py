"""Physically grounded agent motion: x' = A x + B u with an optional
learned lifting of the state.

Agent states are arrays (..., 4) holding (x, y, vx, vy) in meters and m/s.
In lifted mode the state is mapped through phi(x) = x || features(x) before
the linear dynamics and truncated back to the leading entries afterwards,
so a model with zero learned features is identical to the plain linear one.

All operations are pure; agents roll out independently given their controls.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, DivergenceError
from .layers import MlpParams, init_mlp, mlp
from .numcore import Rng, Tensor, concat, l2norm, matmul, stack
from .numcore.tensor import _as_tensor


@dataclass
class LiftNet:
    """x -> x || mlp(x); the truncation back to x is a constant selector."""

    net: MlpParams
    feature_dim: int

    def lift(self, x: Tensor) -> Tensor:
        if self.feature_dim == 0:
            return x
        return concat([x, mlp(x, self.net)], axis=-1)


@dataclass
class DynamicsModel:
    a: Tensor                 # (d_lift, d_lift), units 1/s
    b: Tensor                 # (d_lift, d_u)
    dt: float                 # sampling interval, seconds
    state_dim: int            # d, the physical state size
    phi: Optional[LiftNet]    # None selects plain linear mode

    @property
    def mode(self) -> str:
        return "linear" if self.phi is None else "koopman"

    @property
    def lift_dim(self) -> int:
        return self.a.shape[0]

    @property
    def control_dim(self) -> int:
        return self.b.shape[1]

    def lift(self, x: Tensor) -> Tensor:
        return x if self.phi is None else self.phi.lift(x)

    def c_trunc(self) -> np.ndarray:
        """Constant truncation matrix selecting the physical state."""
        c = np.zeros((self.state_dim, self.lift_dim))
        c[:, : self.state_dim] = np.eye(self.state_dim)
        return c

    def validate(self) -> None:
        if self.dt <= 0:
            raise ContractError("sampling interval must be positive")
        if self.a.shape[0] != self.a.shape[1]:
            raise ContractError("state matrix must be square")
        if self.phi is None and self.lift_dim != self.state_dim:
            raise ContractError("linear mode requires lift dim == state dim")


def kinematic_chain(d: int = 4) -> np.ndarray:
    """Position-velocity integrator matrix: d(pos)/dt = vel."""
    a = np.zeros((d, d))
    half = d // 2
    a[:half, half:] = np.eye(half)
    return a


def linear_dynamics(rng: Rng | None, *, state_dim: int = 4, control_dim: int = 2,
                    dt: float = 0.2, b_scale: float = 0.1,
                    chain_init: bool = True) -> DynamicsModel:
    a0 = kinematic_chain(state_dim) if chain_init else np.zeros((state_dim, state_dim))
    b0 = (rng.normals((state_dim, control_dim), std=b_scale) if rng is not None
          else np.zeros((state_dim, control_dim)))
    return DynamicsModel(
        a=Tensor(a0, requires_grad=True),
        b=Tensor(b0, requires_grad=True),
        dt=dt,
        state_dim=state_dim,
        phi=None,
    )


def koopman_dynamics(rng: Rng, *, state_dim: int = 4, control_dim: int = 2,
                     dt: float = 0.2, feature_dim: int = 12, hidden: int = 32,
                     b_scale: float = 0.1, chain_init: bool = True) -> DynamicsModel:
    lift_dim = state_dim + feature_dim
    a0 = np.zeros((lift_dim, lift_dim))
    if chain_init:
        a0[:state_dim, :state_dim] = kinematic_chain(state_dim)
    b0 = np.zeros((lift_dim, control_dim))
    b0[:state_dim, :] = rng.normals((state_dim, control_dim), std=b_scale)
    if feature_dim > 0:
        # small output layer keeps the lifted start close to the linear model
        phi = LiftNet(init_mlp(rng, [state_dim, hidden, hidden, feature_dim],
                               out_scale=0.01), feature_dim)
    else:
        phi = LiftNet(MlpParams([]), 0)
    return DynamicsModel(
        a=Tensor(a0, requires_grad=True),
        b=Tensor(b0, requires_grad=True),
        dt=dt,
        state_dim=state_dim,
        phi=phi,
    )


def state_derivative(x, u, model: DynamicsModel) -> Tensor:
    """x' for plain or lifted dynamics; accepts (..., d) states."""
    x, u = _as_tensor(x), _as_tensor(u)
    if x.shape[-1] != model.state_dim:
        raise ContractError(
            f"state width {x.shape[-1]} does not match model ({model.state_dim})")
    if u.shape[-1] != model.control_dim:
        raise ContractError(
            f"control width {u.shape[-1]} does not match model ({model.control_dim})")
    lifted = model.lift(x)
    full = matmul(lifted, model.a.T) + matmul(u, model.b.T)
    return full[..., : model.state_dim]


def euler_step(x, u, model: DynamicsModel) -> Tensor:
    """One explicit Euler step x + x' * dt (noise-free mean propagation)."""
    x = _as_tensor(x)
    nxt = x + state_derivative(x, u, model) * model.dt
    if not np.all(np.isfinite(nxt.data)):
        raise DivergenceError("euler step produced non-finite state")
    return nxt


def rollout(x0, controls, model: DynamicsModel) -> Tensor:
    """Iterated Euler steps; entry k is the state after k+1 steps.

    controls: (H, d_u) for a single state or (..., H, d_u) batched; the
    returned states have matching leading shape and horizon length H.
    """
    x0, controls = _as_tensor(x0), _as_tensor(controls)
    horizon = controls.shape[-2]
    if horizon < 1:
        raise ContractError("rollout requires at least one step")
    x = x0
    states = []
    for k in range(horizon):
        x = euler_step(x, controls[..., k, :], model)
        states.append(x)
    return stack(states, axis=-2)


def dynamics_residual_loss(states, controls, model: DynamicsModel) -> Tensor:
    """Mean over steps of || (x_{t+1} - x_t)/dt - A x_t - B u_t ||_2.

    ``states`` is (..., T, d) sampled at the model interval, ``controls``
    is (..., T-1, d_u).  In lifted mode the finite difference and the linear
    form are both taken in the lifted coordinates.
    """
    states, controls = _as_tensor(states), _as_tensor(controls)
    t_len = states.shape[-2]
    if t_len < 2:
        raise ContractError("residual loss needs at least two states")
    if controls.shape[-2] != t_len - 1:
        raise ContractError("need exactly one control per transition")
    lifted = model.lift(states)
    fd = (lifted[..., 1:, :] - lifted[..., :-1, :]) * (1.0 / model.dt)
    pred = matmul(lifted[..., :-1, :], model.a.T) + matmul(controls, model.b.T)
    return l2norm(fd - pred, axis=-1).mean()
