"""Ingestion, windowing, splitting, synthetic scenes and persistence.

Input trajectory tables are comma-separated text with a header row in the
drone-recording layout (frame, id, x, y, xVelocity, yVelocity, optionally
recordingId); a schema mapping can rename columns.  Processed samples are
stored in the "SSMG" binary container whose little-endian framing mirrors
the parameter checkpoint format.

Ingestion and windowing are parallel across scenes in principle; outputs
are merged deterministically in scene-id order.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, FormatError, RowError, SchemaError
from .numcore import Rng, Tensor
from .scenegraph import SceneGraph, build_graph

MAGIC = b"SSMG"
VERSION = 1

MAX_OBSERVATION_SECONDS = 3.0

_CANONICAL_COLUMNS = ("frame", "id", "x", "y", "xVelocity", "yVelocity")


@dataclass
class Scene:
    scene_id: int
    frame_rate: float
    tracks: dict  # agent id -> (T, 5) array of (frame, x, y, vx, vy)

    def validate(self) -> None:
        for agent, track in self.tracks.items():
            frames = track[:, 0]
            if np.any(np.diff(frames) <= 0):
                raise ContractError(f"agent {agent}: frames are not strictly increasing")
            if not np.all(np.isfinite(track[:, 1:3])):
                raise ContractError(f"agent {agent}: non-finite positions")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.frame_rate == other.frame_rate
            and set(self.tracks) == set(other.tracks)
            and all(np.array_equal(self.tracks[k], other.tracks[k]) for k in self.tracks)
        )


@dataclass
class GraphSequence:
    """One training/evaluation sample: an observed window plus its future."""

    agent_ids: list
    observed_states: np.ndarray   # (T_obs, A, 4)
    future_states: np.ndarray     # (t_f, A, 4)
    graphs: list                  # T_obs SceneGraphs over the observed frames
    dt: float                     # seconds between consecutive window frames
    scene_id: int = 0
    start_frame: int = 0

    @property
    def t_obs(self) -> int:
        return self.observed_states.shape[0]

    @property
    def t_f(self) -> int:
        return self.future_states.shape[0]

    @property
    def num_agents(self) -> int:
        return len(self.agent_ids)

    def validate(self) -> None:
        if self.t_obs * self.dt > MAX_OBSERVATION_SECONDS + 1e-9:
            raise ContractError(
                f"observation window {self.t_obs * self.dt:.3f}s exceeds "
                f"{MAX_OBSERVATION_SECONDS}s")
        if self.observed_states.shape[1] != self.num_agents:
            raise ContractError("observed states do not match the agent set")
        if self.future_states.shape[1] != self.num_agents:
            raise ContractError("future states do not match the agent set")
        if len(self.graphs) != self.t_obs:
            raise ContractError("need one graph per observed frame")
        for g in self.graphs:
            if g.node_ids != self.agent_ids:
                raise ContractError("graph node set drifted within the window")
            g.validate()

    def __eq__(self, other) -> bool:
        if not isinstance(other, GraphSequence):
            return NotImplemented
        return (
            self.agent_ids == other.agent_ids
            and np.array_equal(self.observed_states, other.observed_states)
            and np.array_equal(self.future_states, other.future_states)
            and self.graphs == other.graphs
            and self.dt == other.dt
            and self.scene_id == other.scene_id
            and self.start_frame == other.start_frame
        )


# ----------------------------------------------------------------------
# ingestion


def ingest_table(path, schema: Optional[dict] = None, frame_rate: float = 25.0) -> list:
    """Parse a trajectory table into Scenes (one per recording id).

    ``schema`` maps canonical names (frame, id, x, y, xVelocity, yVelocity,
    recordingId) to the actual column names in the file.
    """
    schema = schema or {}
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("frame", f"{path}: empty file, no header row")
        header = [h.strip() for h in header]
        col = {}
        for canonical in _CANONICAL_COLUMNS:
            actual = schema.get(canonical, canonical)
            if actual not in header:
                raise SchemaError(actual)
            col[canonical] = header.index(actual)
        rec_name = schema.get("recordingId", "recordingId")
        rec_idx = header.index(rec_name) if rec_name in header else None

        rows: dict[int, dict] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rec = int(float(row[rec_idx])) if rec_idx is not None else 0
                agent = int(float(row[col["id"]]))
                values = (
                    float(row[col["frame"]]),
                    float(row[col["x"]]),
                    float(row[col["y"]]),
                    float(row[col["xVelocity"]]),
                    float(row[col["yVelocity"]]),
                )
            except (ValueError, IndexError) as exc:
                raise RowError(line_no, f"cannot parse row: {exc}") from exc
            rows.setdefault(rec, {}).setdefault(agent, []).append(values)

    scenes = []
    for rec in sorted(rows):
        tracks = {}
        for agent in sorted(rows[rec]):
            track = np.array(sorted(rows[rec][agent], key=lambda r: r[0]))
            tracks[agent] = track
        scene = Scene(scene_id=rec, frame_rate=frame_rate, tracks=tracks)
        scene.validate()
        scenes.append(scene)
    return scenes


# ----------------------------------------------------------------------
# windowing


def make_windows(scene: Scene, t_obs: int, t_f: int, stride: int = 1,
                 radius: float = 30.0, downsample: int = 1) -> list:
    """Sliding windows of t_obs observed + t_f future frames.

    ``downsample`` keeps every n-th frame, so the window spans
    (t_obs + t_f) * downsample raw frames at dt = downsample / frame_rate.
    Agents without every frame of a window are dropped from that window;
    a window with no fully covered agent is skipped entirely.
    """
    if t_obs < 2 or t_f < 1:
        raise ContractError("need t_obs >= 2 and t_f >= 1")
    dt = downsample / scene.frame_rate
    span = (t_obs + t_f) * downsample
    agent_ids = sorted(scene.tracks)
    lookup = {
        agent: {int(f): i for i, f in enumerate(scene.tracks[agent][:, 0])}
        for agent in agent_ids
    }
    all_frames = [int(f) for agent in agent_ids for f in scene.tracks[agent][:, 0]]
    if not all_frames:
        return []
    lo, hi = min(all_frames), max(all_frames)

    windows = []
    for start in range(lo, hi - span + 2, stride):
        frames = [start + k * downsample for k in range(t_obs + t_f)]
        covered = [a for a in agent_ids if all(f in lookup[a] for f in frames)]
        if not covered:
            continue
        states = np.zeros((t_obs + t_f, len(covered), 4))
        for j, agent in enumerate(covered):
            track = scene.tracks[agent]
            idx = [lookup[agent][f] for f in frames]
            states[:, j, :] = track[idx, 1:5]
        graphs = [build_graph(covered, states[k], radius) for k in range(t_obs)]
        seq = GraphSequence(
            agent_ids=list(covered),
            observed_states=states[:t_obs],
            future_states=states[t_obs:],
            graphs=graphs,
            dt=dt,
            scene_id=scene.scene_id,
            start_frame=start,
        )
        seq.validate()
        windows.append(seq)
    return windows


def split(samples: Sequence, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Deterministic shuffled split; floor sizes, remainder goes to training."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError("split fractions must sum to 1")
    order = list(range(len(samples)))
    Rng(seed).shuffle(order)
    shuffled = [samples[i] for i in order]
    n = len(samples)
    n_val = int(n * fractions[1])
    n_test = int(n * fractions[2])
    n_train = n - n_val - n_test
    return (
        shuffled[:n_train],
        shuffled[n_train:n_train + n_val],
        shuffled[n_train + n_val:],
    )


# ----------------------------------------------------------------------
# synthetic scenes


def synth_generate(kind: str, n_scenes: int, n_agents: int, noise_std: float,
                   seed: int, *, frame_rate: float = 25.0, n_frames: int = 200,
                   speed: Optional[float] = None, radius: Optional[float] = None,
                   accel_max: float = 0.0, lane_gap: float = 4.0) -> list:
    """Deterministic synthetic scenes at 25 Hz.

    highway: straight lanes, per-agent constant velocity plus an optional
    constant acceleration drawn from [-accel_max, accel_max].  roundabout:
    constant-speed circular arcs of per-agent radius and phase.  Position
    noise of the given standard deviation is added, and stored velocities
    are backward finite differences of the (noisy) positions, matching how
    recorded tracks derive them; with zero noise a constant-velocity lane
    is exactly linear and its differenced velocity is exact.
    """
    if n_agents < 1:
        raise ContractError("need at least one agent")
    if kind not in ("highway", "roundabout"):
        raise ContractError(f"unknown scene kind {kind!r}")
    rng = Rng(seed)
    dt = 1.0 / frame_rate
    t = np.arange(n_frames) * dt
    scenes = []
    for scene_id in range(n_scenes):
        tracks = {}
        for agent in range(1, n_agents + 1):
            if kind == "highway":
                v0 = speed if speed is not None else rng.uniform(8.0, 30.0)
                a0 = rng.uniform(-accel_max, accel_max) if accel_max > 0 else 0.0
                x0 = rng.uniform(0.0, 50.0)
                lane = (agent - 1) * lane_gap
                px = x0 + v0 * t + 0.5 * a0 * t * t
                py = np.full(n_frames, lane)
            else:
                r = radius if radius is not None else rng.uniform(15.0, 35.0)
                v0 = speed if speed is not None else rng.uniform(5.0, 12.0)
                omega = v0 / r
                phase = rng.uniform(0.0, 2.0 * np.pi)
                px = r * np.cos(phase + omega * t)
                py = r * np.sin(phase + omega * t)
            if noise_std > 0:
                px = px + rng.normals((n_frames,), std=noise_std)
                py = py + rng.normals((n_frames,), std=noise_std)
            vx = np.empty(n_frames)
            vy = np.empty(n_frames)
            vx[1:] = np.diff(px) * frame_rate
            vy[1:] = np.diff(py) * frame_rate
            vx[0] = vx[1] if n_frames > 1 else 0.0
            vy[0] = vy[1] if n_frames > 1 else 0.0
            tracks[agent] = np.column_stack([np.arange(n_frames, dtype=float),
                                             px, py, vx, vy])
        scenes.append(Scene(scene_id=scene_id, frame_rate=frame_rate, tracks=tracks))
    return scenes


# ----------------------------------------------------------------------
# persistence


def _write_array(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    fh.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(arr.astype("<f8").tobytes())


class _Reader:
    def __init__(self, blob: bytes, offset: int = 0):
        self.blob = blob
        self.offset = offset

    def unpack(self, fmt: str):
        try:
            values = struct.unpack_from(fmt, self.blob, self.offset)
        except struct.error as exc:
            raise FormatError(f"truncated container ({exc})") from exc
        self.offset += struct.calcsize(fmt)
        return values

    def array(self) -> np.ndarray:
        (rank,) = self.unpack("<I")
        shape = self.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if shape else 1
        end = self.offset + 8 * count
        if end > len(self.blob):
            raise FormatError("truncated array payload")
        arr = np.frombuffer(self.blob, dtype="<f8", count=count, offset=self.offset)
        self.offset = end
        return arr.copy().reshape(shape)


def save_processed(path, sequences: Sequence[GraphSequence]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(sequences)))
        for seq in sequences:
            fh.write(struct.pack("<qqd", seq.scene_id, seq.start_frame, seq.dt))
            fh.write(struct.pack("<I", seq.num_agents))
            for agent in seq.agent_ids:
                fh.write(struct.pack("<q", int(agent)))
            _write_array(fh, seq.observed_states)
            _write_array(fh, seq.future_states)
            fh.write(struct.pack("<I", len(seq.graphs)))
            for g in seq.graphs:
                _write_array(fh, g.node_features.data)
                fh.write(struct.pack("<I", g.num_edges))
                for v, s in zip(g.edge_dst, g.edge_src):
                    fh.write(struct.pack("<II", int(v), int(s)))
                _write_array(fh, g.edge_features.data)


def load_processed(path) -> list:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    r = _Reader(blob, 4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    (count,) = r.unpack("<Q")
    sequences = []
    for _ in range(count):
        scene_id, start_frame, dt = r.unpack("<qqd")
        (n_agents,) = r.unpack("<I")
        agent_ids = [r.unpack("<q")[0] for _ in range(n_agents)]
        observed = r.array()
        future = r.array()
        (n_graphs,) = r.unpack("<I")
        graphs = []
        for _ in range(n_graphs):
            nodes = r.array()
            (n_edges,) = r.unpack("<I")
            pairs = [r.unpack("<II") for _ in range(n_edges)]
            edge_feats = r.array()
            graphs.append(SceneGraph(
                node_ids=list(agent_ids),
                node_features=Tensor(nodes),
                edge_dst=np.array([p[0] for p in pairs], dtype=np.int64),
                edge_src=np.array([p[1] for p in pairs], dtype=np.int64),
                edge_features=Tensor(edge_feats),
            ))
        sequences.append(GraphSequence(
            agent_ids=agent_ids,
            observed_states=observed,
            future_states=future,
            graphs=graphs,
            dt=dt,
            scene_id=scene_id,
            start_frame=start_frame,
        ))
    return sequences
