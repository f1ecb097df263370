"""Selective state-space sequence encoding.

Contains zero-order-hold discretization (general-matrix and per-channel
diagonal forms), the input-dependent selective scan, a gated sequence block
built around that scan, and the two-direction "mixed" encoder that produces
the initial control variable for each agent.

Everything here is a pure function of (inputs, params); batch items are
independent and the scan itself is sequential in time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError
from .layers import LinearParams, init_linear, linear
from .numcore import (
    Rng,
    Tensor,
    concat,
    expm1_over_x,
    matmul,
    reshape,
    silu,
    softplus,
    stack,
    zoh_pair,
)
from .numcore.tensor import _as_tensor


def zoh_discretize(a, b, delta: float) -> tuple[Tensor, Tensor]:
    """Exact zero-order-hold discretization of a continuous pair (A, B).

    Abar = exp(delta A); Bbar = integral_0^delta exp(A s) ds * B, evaluated
    through one augmented matrix exponential so a singular or zero A falls
    out of the same formula (Bbar -> delta * B as A -> 0).
    """
    return zoh_pair(a, b, delta)


def zoh_discretize_diag(a_diag, b, delta) -> tuple[Tensor, Tensor]:
    """Elementwise discretization for diagonal state matrices.

    ``a_diag`` holds the diagonal entries; broadcasting applies, so per-step
    and per-channel steps can share one call.  Uses the series-safe
    (e^x - 1)/x kernel, so entries at or near zero are handled exactly.
    """
    a_diag, b = _as_tensor(a_diag), _as_tensor(b)
    delta = _as_tensor(delta)
    if np.any(delta.data <= 0):
        raise ContractError("discretization step must be positive")
    da = delta * a_diag
    abar = da.exp()
    coeff = delta * expm1_over_x(da)
    if b.ndim == coeff.ndim + 1:
        coeff = reshape(coeff, coeff.shape + (1,))  # diag coefficients scale B rows
    return abar, coeff * b


def selective_scan(x, a_bars, b_bars, c_s) -> Tensor:
    """Reference recurrence h_t = Abar_t h_{t-1} + Bbar_t x_t, y_t = C_t h_t.

    x: (T, d_in); a_bars: (T, N, N); b_bars: (T, N, d_in); c_s: (T, d_out, N).
    h starts at zero.  Returns y as (T, d_out).
    """
    x, a_bars = _as_tensor(x), _as_tensor(a_bars)
    b_bars, c_s = _as_tensor(b_bars), _as_tensor(c_s)
    t_len = x.shape[0]
    if t_len < 1:
        raise ContractError("scan requires at least one step")
    if a_bars.shape[0] != t_len or b_bars.shape[0] != t_len or c_s.shape[0] != t_len:
        raise ContractError("per-step parameter count must match sequence length")
    h = Tensor(np.zeros(a_bars.shape[1]))
    ys = []
    for t in range(t_len):
        h = matmul(a_bars[t], h) + matmul(b_bars[t], x[t])
        ys.append(matmul(c_s[t], h))
    return stack(ys, axis=0)


def _diag_scan(xc: Tensor, delta: Tensor, b_in: Tensor, c_out: Tensor,
               a_diag: Tensor) -> Tensor:
    """Batched diagonal selective scan used inside the sequence block.

    xc, delta: (B, T, C); b_in, c_out: (B, T, N); a_diag: (C, N).
    State is (B, C, N); returns y as (B, T, C).
    """
    batch, t_len, channels = xc.shape
    n = a_diag.shape[1]
    h = Tensor(np.zeros((batch, channels, n)))
    ys = []
    for t in range(t_len):
        dt = reshape(delta[:, t, :], (batch, channels, 1))
        da = dt * a_diag
        abar = da.exp()
        bbar = dt * expm1_over_x(da) * reshape(b_in[:, t, :], (batch, 1, n))
        h = abar * h + bbar * reshape(xc[:, t, :], (batch, channels, 1))
        ys.append((h * reshape(c_out[:, t, :], (batch, 1, n))).sum(axis=-1))
    return stack(ys, axis=1)


@dataclass
class MambaBlockParams:
    in_proj: LinearParams               # D -> E*D, no bias (keeps zero input zero)
    gate_proj: Optional[LinearParams]   # D -> E*D, no bias; None disables gating
    conv_kernel: Tensor                 # (E*D, conv_width) causal depthwise taps
    a_log: Tensor                       # (E*D, N); state diagonal is -exp(a_log)
    delta_proj: LinearParams            # E*D -> E*D with bias (sets the step scale)
    b_proj: LinearParams                # E*D -> N, no bias
    c_proj: LinearParams                # E*D -> N, no bias
    out_proj: LinearParams              # E*D -> D, no bias
    activation: str = "silu"            # post-conv nonlinearity: "silu" | "identity"

    @property
    def channel_dim(self) -> int:
        return self.in_proj.in_dim

    @property
    def inner_dim(self) -> int:
        return self.in_proj.out_dim

    @property
    def conv_width(self) -> int:
        return self.conv_kernel.shape[1]

    @property
    def state_dim(self) -> int:
        return self.a_log.shape[1]

    def a_diag(self) -> Tensor:
        """Strictly negative state diagonal, guaranteed for any a_log."""
        return -self.a_log.exp()


# softplus(bias) = dt gives bias = log(e^dt - 1); 0.04 matches 25 Hz sampling
_DT_INIT = 0.04


def init_mamba_block(rng: Rng, channel_dim: int, *, state_dim: int = 10,
                     conv_width: int = 4, expand: int = 4,
                     gate: bool = True, activation: str = "silu") -> MambaBlockParams:
    inner = expand * channel_dim
    a0 = np.log(np.arange(1.0, state_dim + 1.0))       # diagonal starts at -(1..N)
    delta = init_linear(rng, inner, inner, scale=1.0 / np.sqrt(inner))
    delta.bias.data[:] = np.log(np.expm1(_DT_INIT))
    return MambaBlockParams(
        in_proj=init_linear(rng, channel_dim, inner, bias=False),
        gate_proj=init_linear(rng, channel_dim, inner, bias=False) if gate else None,
        conv_kernel=Tensor(rng.normals((inner, conv_width), std=1.0 / np.sqrt(conv_width)),
                           requires_grad=True),
        a_log=Tensor(np.broadcast_to(a0, (inner, state_dim)).copy(), requires_grad=True),
        delta_proj=delta,
        b_proj=init_linear(rng, inner, state_dim, bias=False),
        c_proj=init_linear(rng, inner, state_dim, bias=False),
        out_proj=init_linear(rng, inner, channel_dim, bias=False),
        activation=activation,
    )


def _causal_conv(u: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise causal convolution: y_t = sum_j k[c, j] * u[t-j, c]."""
    batch, t_len, channels = u.shape
    width = kernel.shape[1]
    out = u * reshape(kernel[:, 0], (1, 1, channels))
    for j in range(1, width):
        if j >= t_len:
            break
        shifted = concat([Tensor(np.zeros((batch, j, channels))), u[:, :t_len - j, :]],
                         axis=1)
        out = out + shifted * reshape(kernel[:, j], (1, 1, channels))
    return out


def mamba_block(x, params: MambaBlockParams) -> Tensor:
    """One selective-scan block over a (T, D) or (B, T, D) sequence.

    Pipeline: input expansion, causal depthwise conv, nonlinearity, per-step
    projections of (step size, input matrix, output matrix), diagonal
    discretization, scan, then a gated projection back to D.  Strictly
    causal, and zero input maps to zero output for any parameter values.
    """
    x = _as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.shape[2] != params.channel_dim:
        raise ContractError(
            f"block expects channel dim {params.channel_dim}, got {x.shape[2]}")

    u = linear(x, params.in_proj)
    c = _causal_conv(u, params.conv_kernel)
    if params.activation == "silu":
        c = silu(c)
    elif params.activation != "identity":
        raise ContractError(f"unknown activation {params.activation!r}")

    delta = softplus(linear(c, params.delta_proj))
    b_in = linear(c, params.b_proj)
    c_out = linear(c, params.c_proj)
    y = _diag_scan(c, delta, b_in, c_out, params.a_diag())

    if params.gate_proj is not None:
        y = y * silu(linear(x, params.gate_proj))
    out = linear(y, params.out_proj)
    return reshape(out, out.shape[1:]) if squeeze else out


@dataclass
class MixedMambaParams:
    forward_block: MambaBlockParams
    reverse_block: MambaBlockParams
    final_block: MambaBlockParams
    head: LinearParams                  # D -> control dim, applied at the last step
    reverse_gates_forward: bool = False # combine r with f instead of the raw series


def init_mixed_mamba(rng: Rng, channel_dim: int, control_dim: int, *,
                     state_dim: int = 10, conv_width: int = 4, expand: int = 4,
                     head_scale: float = 0.0,
                     reverse_gates_forward: bool = False) -> MixedMambaParams:
    def block():
        return init_mamba_block(rng, channel_dim, state_dim=state_dim,
                                conv_width=conv_width, expand=expand)

    head = init_linear(rng, channel_dim, control_dim, scale=max(head_scale, 1e-12))
    if head_scale == 0.0:
        head.weight.data[:] = 0.0
    return MixedMambaParams(block(), block(), block(), head,
                            reverse_gates_forward=reverse_gates_forward)


def _flip_time(x: Tensor) -> Tensor:
    return x[:, ::-1, :]


def mixed_mamba_encode(x, params: MixedMambaParams) -> Tensor:
    """Two-direction encoding of per-agent series into one control vector.

    f runs the series forward; r runs the time-reversed series through its
    own block and is flipped back; the reversed branch gates the original
    series (or the forward branch, behind the flag), the sum is refined by a
    residual final block, and the head reads the last step.

    x: (B, T, D) or (T, D); returns (B, control_dim) or (control_dim,).
    """
    x = _as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    f = mamba_block(x, params.forward_block)
    r = _flip_time(mamba_block(_flip_time(x), params.reverse_block))
    combined = f + r * (f if params.reverse_gates_forward else x)
    out = combined + mamba_block(combined, params.final_block)
    u0 = linear(out[:, -1, :], params.head)
    return reshape(u0, u0.shape[1:]) if squeeze else u0


def single_mamba_encode(x, params: MixedMambaParams) -> Tensor:
    """Forward block alone with the same output head (ablation counterpart)."""
    x = _as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    out = mamba_block(x, params.forward_block)
    u0 = linear(out[:, -1, :], params.head)
    return reshape(u0, u0.shape[1:]) if squeeze else u0
