"""Per-frame interaction graphs and the dynamic graph-attention layer.

A scene graph has one node per agent and directed proximity edges carrying
(dx, dy, distance) features; every node also carries a self-loop so each
inclusive neighbourhood contains the node itself.  Attention scores put the
nonlinearity inside the scoring function (dynamic attention) and heads are
combined by concatenation.

Layers are pure functions of (graph, params); different graphs can be
evaluated concurrently and parameters are read-only during a forward/backward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .numcore import (
    Rng,
    Tensor,
    concat,
    gather,
    leaky_relu,
    matmul,
    reshape,
    segment_sum,
    tsum,
)


@dataclass
class SceneGraph:
    node_ids: list            # stable agent identifiers, in node order
    node_features: Tensor     # (A, F); columns 0..1 are position in meters
    edge_dst: np.ndarray      # (E,) int64 index of the aggregating node v
    edge_src: np.ndarray      # (E,) int64 index of the neighbour
    edge_features: Tensor     # (E, 3): dx, dy, distance in meters

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return len(self.edge_dst)

    @property
    def edges(self) -> np.ndarray:
        """Directed pairs (v, neighbour) as an (E, 2) index array."""
        return np.column_stack([self.edge_dst, self.edge_src])

    def index_of(self, node_id) -> int:
        return self.node_ids.index(node_id)

    def with_features(self, node_features: Tensor) -> "SceneGraph":
        """Same topology with replaced node features."""
        return SceneGraph(self.node_ids, node_features, self.edge_dst,
                          self.edge_src, self.edge_features)

    def validate(self) -> None:
        n = self.num_nodes
        if self.node_features.shape[0] != n:
            raise ContractError("node feature count does not match node count")
        if self.num_edges and (self.edge_dst.max() >= n or self.edge_src.max() >= n
                               or self.edge_dst.min() < 0 or self.edge_src.min() < 0):
            raise ContractError("edge endpoint references a missing node")
        loops = set(self.edge_dst[self.edge_dst == self.edge_src].tolist())
        if loops != set(range(n)):
            raise ContractError("every node must carry a self-loop")
        ef = self.edge_features.data
        norms = np.linalg.norm(ef[:, :2], axis=1)
        if self.num_edges and np.abs(norms - ef[:, 2]).max() > 1e-9:
            raise ContractError("edge distance entry disagrees with displacement norm")

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneGraph):
            return NotImplemented
        return (
            self.node_ids == other.node_ids
            and np.array_equal(self.node_features.data, other.node_features.data)
            and np.array_equal(self.edge_dst, other.edge_dst)
            and np.array_equal(self.edge_src, other.edge_src)
            and np.array_equal(self.edge_features.data, other.edge_features.data)
        )


def build_graph(agent_ids: Sequence, states, radius: float = 30.0) -> SceneGraph:
    """Graph over one frame: bidirectional edges within ``radius`` meters.

    ``states`` is (A, F) with positions in the first two columns; node
    features are the states as given.  Every node gets a self-loop with a
    zero displacement feature.  Edges are ordered by (destination id,
    source id), which keeps aggregation order independent of the node
    ordering passed in.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 1:
        states = states[None, :]
    n = states.shape[0]
    if n < 1:
        raise ContractError("build_graph requires at least one agent")
    if not np.all(np.isfinite(states[:, :2])):
        raise ContractError("agent positions must be finite")
    ids = list(agent_ids)
    if len(ids) != n:
        raise ContractError("agent id count does not match state count")

    pos = states[:, :2]
    diff = pos[None, :, :] - pos[:, None, :]          # diff[v, t] = pos[t] - pos[v]
    dist = np.sqrt((diff * diff).sum(axis=2))
    pairs = []
    for v in range(n):
        pairs.append((v, v))
        for t in range(n):
            if t != v and dist[v, t] <= radius:
                pairs.append((v, t))
    pairs.sort(key=lambda e: (ids[e[0]], ids[e[1]]))
    dst = np.array([p[0] for p in pairs], dtype=np.int64)
    src = np.array([p[1] for p in pairs], dtype=np.int64)
    feats = np.zeros((len(pairs), 3))
    feats[:, :2] = diff[dst, src]
    feats[:, 2] = dist[dst, src]
    return SceneGraph(ids, Tensor(states), dst, src, Tensor(feats))


def merge_graphs(graphs: Sequence[SceneGraph]) -> SceneGraph:
    """Disjoint union of graphs (block structure, per-graph edge order kept)."""
    ids: list = []
    dsts, srcs, feats, nodes = [], [], [], []
    offset = 0
    for g in graphs:
        ids.extend(g.node_ids)
        dsts.append(g.edge_dst + offset)
        srcs.append(g.edge_src + offset)
        feats.append(g.edge_features)
        nodes.append(g.node_features)
        offset += g.num_nodes
    return SceneGraph(
        ids,
        concat(nodes, axis=0),
        np.concatenate(dsts),
        np.concatenate(srcs),
        concat(feats, axis=0),
    )


@dataclass
class GatParams:
    attn_weight: Tensor   # (heads, att_dim, 2F + edge_dim)
    attn_vec: Tensor      # (heads, att_dim)
    w_self: Tensor        # (heads, head_dim, F)
    w_neigh: Tensor       # (heads, head_dim, F)
    bias: Tensor          # (heads, head_dim)
    leak: float = 0.2

    @property
    def heads(self) -> int:
        return self.attn_weight.shape[0]

    @property
    def head_dim(self) -> int:
        return self.w_self.shape[1]

    @property
    def out_dim(self) -> int:
        return self.heads * self.head_dim


def init_gat_params(rng: Rng, in_dim: int, *, heads: int = 3, head_dim: int = 8,
                    att_dim: int = 16, edge_dim: int = 3, leak: float = 0.2) -> GatParams:
    score_in = 2 * in_dim + edge_dim

    def glorot(shape, fan_in, fan_out):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        return Tensor(rng.normals(shape, std=std), requires_grad=True)

    return GatParams(
        attn_weight=glorot((heads, att_dim, score_in), score_in, att_dim),
        attn_vec=glorot((heads, att_dim), att_dim, 1),
        w_self=glorot((heads, head_dim, in_dim), in_dim, head_dim),
        w_neigh=glorot((heads, head_dim, in_dim), in_dim, head_dim),
        bias=Tensor(np.zeros((heads, head_dim)), requires_grad=True),
        leak=leak,
    )


def _check_dims(graph: SceneGraph, params: GatParams) -> None:
    f = graph.node_features.shape[1]
    score_in = params.attn_weight.shape[2]
    edge_dim = graph.edge_features.shape[1]
    if score_in != 2 * f + edge_dim:
        raise ContractError(
            f"attention weight expects input width {score_in}, "
            f"graph provides {2 * f + edge_dim}"
        )
    if params.w_self.shape[2] != f or params.w_neigh.shape[2] != f:
        raise ContractError("update matrices do not match node feature width")
    if params.attn_vec.shape != params.attn_weight.shape[:2]:
        raise ContractError("attention vector length must equal score width")


def _edge_scores(graph: SceneGraph, params: GatParams) -> Tensor:
    """Pre-softmax attention scores, one per (edge, head)."""
    h_dst = gather(graph.node_features, graph.edge_dst)
    h_src = gather(graph.node_features, graph.edge_src)
    z = concat([h_dst, h_src, graph.edge_features], axis=1)   # (E, 2F+edge)
    heads, att_dim, score_in = params.attn_weight.shape
    w = reshape(params.attn_weight, (heads * att_dim, score_in))
    s = reshape(matmul(z, w.T), (z.shape[0], heads, att_dim))
    s = leaky_relu(s, params.leak)
    return tsum(s * reshape(params.attn_vec, (1, heads, att_dim)), axis=2)  # (E, heads)


def _segment_softmax(scores: Tensor, seg: np.ndarray, num_segments: int) -> Tensor:
    # subtracting the per-segment max is shift-invariant, so treating the max
    # as a constant keeps the gradient exact
    m = np.full((num_segments,) + scores.shape[1:], -np.inf)
    np.maximum.at(m, seg, scores.data)
    e = (scores - Tensor(m[seg])).exp()
    denom = segment_sum(e, seg, num_segments)
    return e / gather(denom, seg)


def gat_attention(graph: SceneGraph, params: GatParams, node) -> np.ndarray:
    """Attention weights of one node over the whole node set, per head.

    Returns an (A, heads) array; entries for nodes outside the inclusive
    neighbourhood are exactly zero and each head column sums to one.
    """
    _check_dims(graph, params)
    if node not in graph.node_ids:
        raise ContractError(f"unknown node id {node!r}")
    v = graph.index_of(node)
    mask = graph.edge_dst == v
    scores = _edge_scores(graph, params)
    alpha = _segment_softmax(scores, graph.edge_dst, graph.num_nodes)
    out = np.zeros((graph.num_nodes, params.heads))
    np.add.at(out, graph.edge_src[mask], alpha.data[mask])
    return out


def gat_layer(graph: SceneGraph, params: GatParams) -> Tensor:
    """One attention layer: bias + self transform + attention-weighted sum
    of transformed neighbours, heads concatenated.  Output is (A, out_dim)."""
    _check_dims(graph, params)
    n = graph.num_nodes
    heads, head_dim, f = params.w_self.shape

    scores = _edge_scores(graph, params)
    alpha = _segment_softmax(scores, graph.edge_dst, n)        # (E, heads)

    h_src = gather(graph.node_features, graph.edge_src)
    w_neigh = reshape(params.w_neigh, (heads * head_dim, f))
    messages = reshape(matmul(h_src, w_neigh.T), (graph.num_edges, heads, head_dim))
    weighted = messages * reshape(alpha, (graph.num_edges, heads, 1))
    agg = segment_sum(weighted, graph.edge_dst, n)             # (A, heads, head_dim)

    w_self = reshape(params.w_self, (heads * head_dim, f))
    own = reshape(matmul(graph.node_features, w_self.T), (n, heads, head_dim))

    out = reshape(params.bias, (1, heads, head_dim)) + own + agg
    return reshape(out, (n, heads * head_dim))
