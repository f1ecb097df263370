"""Forward evolution of control variables: u_{t+1} = A3 u_t + B3 g(x_t, u_t).

g combines a graph-attention read of the latest observed scene graph (node
features replaced by the current state estimates), a state MLP, and a
multiplicative gate computed from the current controls.  Future graphs are
not observable, so the last observed graph acts as a proxy for the whole
horizon; the graph branch can be switched off for ablations, in which case
it is replaced by zeros of the same width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DynamicsModel, euler_step
from .errors import ContractError
from .layers import MlpParams, init_mlp, mlp
from .numcore import Rng, Tensor, concat, matmul, stack
from .numcore.tensor import _as_tensor
from .scenegraph import GatParams, SceneGraph, gat_layer, init_gat_params


@dataclass
class ControlDecoder:
    a3: Tensor               # (d_u, d_u) constant recursion matrix
    b3: Tensor               # (d_u, d_g) forcing matrix
    g_gnn: GatParams         # attention layer over the frozen last graph
    g_mlp_state: MlpParams   # state branch
    g_mlp_ctrl: MlpParams    # control gate branch
    graph_considered: bool = True
    state_scale: float = 1.0  # applied to states before the learned branches

    @property
    def control_dim(self) -> int:
        return self.a3.shape[0]

    @property
    def graph_width(self) -> int:
        return self.g_gnn.out_dim

    @property
    def g_dim(self) -> int:
        return self.b3.shape[1]


def init_control_decoder(rng: Rng, *, state_dim: int = 4, control_dim: int = 2,
                         graph_width: int = 8, state_width: int = 8,
                         hidden: int = 64, graph_considered: bool = True,
                         state_scale: float = 1.0,
                         a3_init: float = 0.9, b3_scale: float = 0.05) -> ControlDecoder:
    g_dim = graph_width + state_width
    return ControlDecoder(
        a3=Tensor(a3_init * np.eye(control_dim), requires_grad=True),
        b3=Tensor(rng.normals((control_dim, g_dim), std=b3_scale), requires_grad=True),
        g_gnn=init_gat_params(rng, state_dim, heads=1, head_dim=graph_width,
                              att_dim=8),
        g_mlp_state=init_mlp(rng, [state_dim, hidden, state_width]),
        g_mlp_ctrl=init_mlp(rng, [control_dim, hidden, g_dim]),
        graph_considered=graph_considered,
        state_scale=state_scale,
    )


def g_eval(states, controls, last_graph: SceneGraph, decoder: ControlDecoder) -> Tensor:
    """g = [graph branch || state branch] * control gate, per agent.

    ``states`` must align with the graph's node order.  With the graph branch
    disabled its slot is filled with zeros of the same width.
    """
    states, controls = _as_tensor(states), _as_tensor(controls)
    n = states.shape[0]
    if last_graph.num_nodes != n:
        raise ContractError(
            f"graph has {last_graph.num_nodes} nodes but {n} agent states given")
    scaled = states * decoder.state_scale
    if decoder.graph_considered:
        graph_part = gat_layer(last_graph.with_features(scaled), decoder.g_gnn)
    else:
        graph_part = Tensor(np.zeros((n, decoder.graph_width)))
    state_part = mlp(scaled, decoder.g_mlp_state)
    gate = mlp(controls, decoder.g_mlp_ctrl)
    return concat([graph_part, state_part], axis=1) * gate


def control_step(controls, states, last_graph: SceneGraph,
                 decoder: ControlDecoder) -> Tensor:
    """u_{t+1} = A3 u_t + B3 g(x_t, u_t)."""
    g = g_eval(states, controls, last_graph, decoder)
    return matmul(_as_tensor(controls), decoder.a3.T) + matmul(g, decoder.b3.T)


@dataclass
class DecodedHorizon:
    states: Tensor          # (A, H, d) estimated mean states
    controls: Tensor        # (A, H, d_u) evolved controls u_1..u_H
    controls_used: Tensor   # (A, H, d_u) control consumed by each step (u_0..u_{H-1})
    g_features: Tensor      # (A, H+1, d_g) decoder features at steps 0..H


def decode_horizon(u0, x0, last_graph: SceneGraph, decoder: ControlDecoder,
                   model: DynamicsModel, horizon: int) -> DecodedHorizon:
    """Alternate one dynamics step with one control update over the horizon.

    Each step first advances the state with the current control, then evolves
    the control from the state just produced, so step k consumes u_{k-1} and
    emits u_k.  Extending the horizon never changes earlier outputs.
    """
    if horizon < 1:
        raise ContractError("horizon must be at least one step")
    u = _as_tensor(u0)
    x = _as_tensor(x0)
    g = g_eval(x, u, last_graph, decoder)
    states, controls, used, feats = [], [], [], [g]
    for _ in range(horizon):
        used.append(u)
        x = euler_step(x, u, model)
        g = g_eval(x, u, last_graph, decoder)
        u = matmul(u, decoder.a3.T) + matmul(g, decoder.b3.T)
        states.append(x)
        controls.append(u)
        feats.append(g)
    return DecodedHorizon(
        states=stack(states, axis=1),
        controls=stack(controls, axis=1),
        controls_used=stack(used, axis=1),
        g_features=stack(feats, axis=1),
    )
