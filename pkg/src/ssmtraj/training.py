"""End-to-end model assembly, loss composition, and the optimization loop.

The model chains the per-frame graph encoder, the sequence encoder that
infers an initial control per agent, the control-variable recursion
interleaved with dynamics steps, and covariance propagation with a learned
process-noise head.  Rollouts run in a per-agent frame anchored at the last
observed position, which keeps feature magnitudes bounded; results are
mapped back to absolute coordinates.

Training is deterministic for a fixed seed: batches are grouped by shape,
shuffled by a seeded generator, and gradients are applied by an
adaptive-moment optimizer with global-norm clipping.
"""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .control import ControlDecoder, decode_horizon, init_control_decoder
from .data import GraphSequence
from .dynamics import (
    DynamicsModel,
    koopman_dynamics,
    linear_dynamics,
    dynamics_residual_loss,
    state_derivative,
)
from .errors import ContractError, NumericsError, TrainingAbortError
from .evaluation import aggregate_reports, compute_metrics
from .layers import LinearParams, init_linear, iter_tensors
from .numcore import Rng, Tensor, concat, l2norm, no_grad, stack, swapaxes
from .scenegraph import GatParams, init_gat_params, gat_layer, merge_graphs
from .seqssm import init_mixed_mamba, mixed_mamba_encode, single_mamba_encode
from .uncertainty import jacobian_batch, gaussian_nll, process_noise

# ablation grid: (two-direction encoder, graph branch in the control
# recursion, plain linear dynamics instead of the lifted variant)
ABLATIONS = {
    "H1": (True, False, True),
    "H2": (False, True, True),
    "H3": (True, False, False),
    "H4": (False, True, False),
    "H5": (False, False, True),
    "H6": (True, True, False),
    "H7": (False, False, False),
    "H8": (True, True, True),
}


@dataclass
class ModelConfig:
    # ablation switches
    mixed_mamba: bool = True
    graph_considered: bool = True
    linear_koopman: bool = True
    # sequence block
    state_expansion: int = 10
    conv_width: int = 4
    block_expansion: int = 4
    # graph encoder
    gat_heads: int = 3
    gat_head_dim: int = 8
    gat_att_dim: int = 16
    gat_leak: float = 0.2
    # dynamics
    state_dim: int = 4
    control_dim: int = 2
    lift_features: int = 12
    phi_hidden: int = 32
    dt: float = 0.2
    # control decoder
    g_graph_dim: int = 8
    g_state_dim: int = 8
    g_hidden: int = 64
    reverse_gates_forward: bool = False
    # loss weights
    nll_weight: float = 1.0
    pos_weight: float = 1.0
    dyn_weight: float = 0.1
    nll_full_state: bool = False
    # optimization
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 1.0
    lr_decay: float = 1.0
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    target_val_ade: float = 0.0   # early stop once validation ADE dips below (0 = off)
    # feature conditioning
    feature_scale: float = 0.1
    encoder_head_scale: float = 0.3

    def apply_ablation(self, name: str) -> "ModelConfig":
        if name not in ABLATIONS:
            raise ContractError(f"unknown ablation {name!r}; expected H1..H8")
        mixed, graph, linear = ABLATIONS[name]
        return replace(self, mixed_mamba=mixed, graph_considered=graph,
                       linear_koopman=linear)


@dataclass
class PredictionResult:
    """Forecast for one scene: mean states, position covariances, controls."""

    agent_ids: list
    states: np.ndarray                 # (A, H, 4) absolute
    covariances: Optional[np.ndarray]  # (A, H, 2, 2)
    controls: np.ndarray               # (A, H, d_u)

    @property
    def positions(self) -> np.ndarray:
        return self.states[..., :2]

    def validate(self) -> None:
        horizon = self.states.shape[1]
        if self.covariances is not None:
            if self.covariances.shape[:2] != (len(self.agent_ids), horizon):
                raise ContractError("covariance horizon does not match states")
            skew = np.abs(self.covariances
                          - np.swapaxes(self.covariances, -1, -2)).max()
            if skew > 1e-9:
                raise ContractError("covariances are not symmetric")
            if np.linalg.eigvalsh(self.covariances).min() < -1e-8:
                raise ContractError("covariances are not positive semidefinite")
        if self.controls.shape[:2] != (len(self.agent_ids), horizon):
            raise ContractError("control horizon does not match states")


@dataclass
class _Batch:
    samples: list
    observed: np.ndarray        # (B, T, A, 4)
    future: np.ndarray          # (B, H, A, 4)
    enc_graph: object           # merged graph over (b, t) frames, B*T*A nodes
    last_graph: object          # merged last-frame graph, B*A nodes
    anchors: np.ndarray         # (B*A, 2) last observed position per agent
    enc_features: np.ndarray    # (B*T*A, 4) conditioned encoder inputs


@dataclass
class _ForwardTensors:
    states_rel: Tensor          # (B*A, H, 4)
    cov_pos: Tensor             # (B*A, H, 2, 2)
    cov_full: Tensor            # (B*A, H, 4, 4)
    controls: Tensor            # (B*A, H, d_u) evolved controls
    controls_used: Tensor       # (B*A, H, d_u)
    truth_rel: np.ndarray       # (B*A, H, 4)
    x0_rel: np.ndarray          # (B*A, 4)


class TrajectoryPredictor:
    """The assembled forecasting model; parameters live in sub-module structs."""

    def __init__(self, config: ModelConfig, rng: Optional[Rng] = None):
        self.config = config
        rng = rng or Rng(config.seed)
        feat_dim = config.state_dim
        self.encoder_gat: GatParams = init_gat_params(
            rng, feat_dim, heads=config.gat_heads, head_dim=config.gat_head_dim,
            att_dim=config.gat_att_dim, leak=config.gat_leak)
        channel_dim = config.gat_heads * config.gat_head_dim
        self.encoder = init_mixed_mamba(
            rng, channel_dim, config.control_dim,
            state_dim=config.state_expansion, conv_width=config.conv_width,
            expand=config.block_expansion, head_scale=config.encoder_head_scale,
            reverse_gates_forward=config.reverse_gates_forward)
        if config.linear_koopman:
            self.dynamics: DynamicsModel = linear_dynamics(
                rng, state_dim=config.state_dim, control_dim=config.control_dim,
                dt=config.dt)
        else:
            self.dynamics = koopman_dynamics(
                rng, state_dim=config.state_dim, control_dim=config.control_dim,
                dt=config.dt, feature_dim=config.lift_features,
                hidden=config.phi_hidden)
        self.decoder: ControlDecoder = init_control_decoder(
            rng, state_dim=config.state_dim, control_dim=config.control_dim,
            graph_width=config.g_graph_dim, state_width=config.g_state_dim,
            hidden=config.g_hidden, graph_considered=config.graph_considered,
            state_scale=config.feature_scale)
        g_dim = config.g_graph_dim + config.g_state_dim
        self.noise_head: LinearParams = init_linear(rng, g_dim, config.state_dim,
                                                    scale=1e-12)
        self.noise_head.weight.data[:] = 0.0
        # softplus(bias) = 0.1 m^2 keeps early likelihoods well conditioned
        self.noise_head.bias.data[:] = np.log(np.expm1(0.1))

    # ------------------------------------------------------------------
    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for prefix, obj in (
            ("encoder_gat", self.encoder_gat),
            ("encoder", self.encoder),
            ("dynamics", self.dynamics),
            ("decoder", self.decoder),
            ("noise_head", self.noise_head),
        ):
            for name, tensor in iter_tensors(obj, prefix):
                if tensor.requires_grad:
                    out[name] = tensor
        return out

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ContractError(
                f"parameter names do not match checkpoint "
                f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
        for name, tensor in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ContractError(f"{name}: shape {arr.shape} != {tensor.data.shape}")
            tensor.data = arr.copy()
            tensor.grad = None

    # ------------------------------------------------------------------
    def prepare_batch(self, samples: Sequence[GraphSequence]) -> _Batch:
        first = samples[0]
        for s in samples:
            if (s.num_agents, s.t_obs, s.t_f) != (first.num_agents, first.t_obs,
                                                  first.t_f):
                raise ContractError("batch samples must share (agents, t_obs, t_f)")
        observed = np.stack([s.observed_states for s in samples])  # (B,T,A,4)
        future = np.stack([s.future_states for s in samples])      # (B,H,A,4)
        b, t, a, _ = observed.shape
        enc_graph = merge_graphs([g for s in samples for g in s.graphs])
        last_graph = merge_graphs([s.graphs[-1] for s in samples])
        anchors = observed[:, -1, :, :2].reshape(b * a, 2)
        scene_anchor = observed[:, -1, :, :2].mean(axis=1)         # (B, 2)
        fs = self.config.feature_scale
        feats = np.concatenate([
            (observed[..., :2] - scene_anchor[:, None, None, :]) * fs,
            observed[..., 2:] * fs,
        ], axis=3)
        return _Batch(list(samples), observed, future, enc_graph, last_graph,
                      anchors, feats.reshape(b * t * a, 4))

    def _encode(self, batch: _Batch) -> Tensor:
        b, t, a, _ = batch.observed.shape
        node_feats = Tensor(batch.enc_features)
        gat_out = gat_layer(batch.enc_graph.with_features(node_feats),
                            self.encoder_gat)                      # (B*T*A, D)
        d = gat_out.shape[1]
        series = swapaxes(gat_out.reshape(b, t, a, d), 1, 2).reshape(b * a, t, d)
        if self.config.mixed_mamba:
            return mixed_mamba_encode(series, self.encoder)
        return single_mamba_encode(series, self.encoder)

    def _transition(self, controls_value: np.ndarray) -> Callable[[Tensor], Tensor]:
        u_const = Tensor(controls_value)

        def psi(x: Tensor) -> Tensor:
            return x + state_derivative(x, u_const, self.dynamics) * self.dynamics.dt

        return psi

    def forward_batch(self, batch: _Batch) -> _ForwardTensors:
        cfg = self.config
        b, t, a, _ = batch.observed.shape
        horizon = batch.future.shape[1]
        u0 = self._encode(batch)                                   # (B*A, d_u)

        last = batch.observed[:, -1, :, :].reshape(b * a, 4)
        x0_rel = last.copy()
        x0_rel[:, :2] = 0.0
        decoded = decode_horizon(u0, Tensor(x0_rel), batch.last_graph,
                                 self.decoder, self.dynamics, horizon)

        # covariance recursion P <- sym(F P F^T) + diag(q), from P = 0
        eye = np.eye(cfg.state_dim)
        if self.dynamics.mode == "linear":
            f_const = Tensor(eye) + self.dynamics.a * self.dynamics.dt
        cov = Tensor(np.zeros((b * a, cfg.state_dim, cfg.state_dim)))
        covs = []
        states_value = decoded.states.data
        used_value = decoded.controls_used.data
        for k in range(horizon):
            q = process_noise(decoded.g_features[:, k, :], self.noise_head)
            if self.dynamics.mode == "linear":
                f = f_const
            else:
                x_before = x0_rel if k == 0 else states_value[:, k - 1, :]
                f = Tensor(jacobian_batch(self._transition(used_value[:, k, :]),
                                          x_before))
            cov = f @ cov @ swapaxes(f, -1, -2) + q[..., None] * Tensor(eye)
            cov = (cov + swapaxes(cov, -1, -2)) * 0.5
            covs.append(cov)
        cov_full = stack(covs, axis=1)                             # (B*A, H, 4, 4)
        cov_pos = cov_full[:, :, :2, :2]

        future = batch.future                                      # (B, H, A, 4)
        truth_rel = future.transpose(0, 2, 1, 3).reshape(b * a, horizon, 4).copy()
        truth_rel[..., :2] -= batch.anchors[:, None, :]
        return _ForwardTensors(decoded.states, cov_pos, cov_full, decoded.controls,
                               decoded.controls_used, truth_rel, x0_rel)

    def results(self, batch: _Batch, fwd: Optional[_ForwardTensors] = None) -> list:
        """Per-scene PredictionResults in absolute coordinates."""
        if fwd is None:
            with no_grad():
                fwd = self.forward_batch(batch)
        b = len(batch.samples)
        a = batch.samples[0].num_agents
        horizon = batch.future.shape[1]
        states = fwd.states_rel.data.copy()
        states[..., :2] += batch.anchors[:, None, :]
        states = states.reshape(b, a, horizon, 4)
        covs = fwd.cov_pos.data.reshape(b, a, horizon, 2, 2)
        controls = fwd.controls.data.reshape(b, a, horizon, -1)
        out = []
        for i, sample in enumerate(batch.samples):
            res = PredictionResult(list(sample.agent_ids), states[i], covs[i],
                                   controls[i])
            res.validate()
            out.append(res)
        return out


def forward(sample: GraphSequence, model: TrajectoryPredictor) -> PredictionResult:
    """Forecast a single sample (batch of one); deterministic."""
    batch = model.prepare_batch([sample])
    return model.results(batch)[0]


def total_loss(fwd: _ForwardTensors, model: TrajectoryPredictor) -> tuple:
    """Weighted sum of likelihood, squared displacement, and dynamics terms.

    Returns (loss, ade, anll, dyn) as tensors; ade is the flat mean over
    agents and steps of the position error norm and enters squared.
    """
    cfg = model.config
    pos_err = fwd.states_rel[..., :2] - Tensor(fwd.truth_rel[..., :2])
    ade = l2norm(pos_err, axis=-1).mean()

    if cfg.nll_full_state:
        nll = gaussian_nll(Tensor(fwd.truth_rel), fwd.states_rel, fwd.cov_full)
    else:
        nll = gaussian_nll(Tensor(fwd.truth_rel[..., :2]), fwd.states_rel[..., :2],
                           fwd.cov_pos)
    anll = nll.mean()

    path = concat([Tensor(fwd.x0_rel[:, None, :]), Tensor(fwd.truth_rel)], axis=1)
    dyn = dynamics_residual_loss(path, fwd.controls_used, model.dynamics)

    loss = cfg.nll_weight * anll + cfg.pos_weight * ade * ade + cfg.dyn_weight * dyn
    return loss, ade, anll, dyn


class Adam:
    """Adaptive-moment optimizer with global gradient-norm clipping."""

    def __init__(self, params: "OrderedDict[str, Tensor]", lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8, clip: float = 1.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, lr: Optional[float] = None) -> float:
        lr = self.lr if lr is None else lr
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        scale = self.clip / norm if (self.clip > 0 and norm > self.clip) else 1.0
        self.step_count += 1
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for k, p in self.params.items():
            g = grads[k] * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainResult:
    model: TrajectoryPredictor
    best_state: "OrderedDict[str, np.ndarray]"
    log: list           # rows of (epoch, train_loss, val_ade, val_fde, wall_seconds)
    best_val_ade: float
    stopped_epoch: int


LOG_HEADER = ("epoch", "train_loss", "val_ADE", "val_FDE", "wall_seconds")


def _group_batches(samples: Sequence[GraphSequence], batch_size: int) -> list:
    groups: dict[tuple, list] = {}
    for s in samples:
        groups.setdefault((s.num_agents, s.t_obs, s.t_f), []).append(s)
    batches = []
    for key in sorted(groups):
        bucket = groups[key]
        for i in range(0, len(bucket), batch_size):
            batches.append(bucket[i:i + batch_size])
    return batches


def evaluate_model(model: TrajectoryPredictor, samples: Sequence[GraphSequence]):
    """Aggregated metric report for a sample set (no gradients)."""
    reports = []
    for chunk in _group_batches(samples, model.config.batch_size):
        batch = model.prepare_batch(chunk)
        for sample, result in zip(chunk, model.results(batch)):
            reports.append(compute_metrics(result, sample.future_states
                                           .transpose(1, 0, 2)[..., :2]))
    return aggregate_reports(reports)


def train(partitions, config: ModelConfig,
          progress: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Optimize a fresh model on (train, validation, test) partitions.

    Logs one row per epoch, keeps the parameters with the best validation
    ADE (training loss when there is no validation split), and raises
    TrainingAbortError carrying the last good state if the loss diverges.
    """
    train_set, val_set = list(partitions[0]), list(partitions[1])
    if not train_set:
        raise ContractError("training partition is empty")
    if config.epochs < 1:
        raise ContractError("need at least one epoch")
    model = TrajectoryPredictor(config)
    params = model.named_parameters()
    opt = Adam(params, config.learning_rate, (config.beta1, config.beta2),
               clip=config.grad_clip)
    shuffle_rng = Rng(config.seed ^ 0x5DEECE66D)

    raw_batches = _group_batches(train_set, config.batch_size)
    batches = [model.prepare_batch(chunk) for chunk in raw_batches]

    log: list = []
    best_state = model.state_dict()
    best_score = np.inf
    best_val_ade = np.inf
    t_start = time.perf_counter()
    stopped = config.epochs
    for epoch in range(1, config.epochs + 1):
        order = list(range(len(batches)))
        shuffle_rng.shuffle(order)
        lr = config.learning_rate * config.lr_decay ** (epoch - 1)
        losses = []
        for idx in order:
            batch = batches[idx]
            try:
                fwd = model.forward_batch(batch)
                loss, _, _, _ = total_loss(fwd, model)
            except NumericsError as exc:
                raise TrainingAbortError(
                    f"forward diverged at epoch {epoch}: {exc}",
                    best_state=best_state, log=log) from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingAbortError(
                    f"loss diverged at epoch {epoch}", best_state=best_state, log=log)
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            losses.append(value)
        opt.zero_grad()

        val_ade = val_fde = float("nan")
        if val_set:
            report = evaluate_model(model, val_set)
            val_ade, val_fde = report.ade, report.fde
        train_loss = float(np.mean(losses))
        score = val_ade if val_set else train_loss
        if score < best_score:
            best_score = score
            best_state = model.state_dict()
            best_val_ade = val_ade
        row = (epoch, train_loss, val_ade, val_fde, time.perf_counter() - t_start)
        log.append(row)
        if progress is not None:
            progress(dict(zip(LOG_HEADER, row)))
        if config.target_val_ade > 0 and val_set and val_ade <= config.target_val_ade:
            stopped = epoch
            break

    model.load_state_dict(best_state)
    return TrainResult(model, best_state, log, best_val_ade, stopped)
