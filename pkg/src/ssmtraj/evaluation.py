"""Displacement and likelihood metrics plus the open-loop motion baselines.

Metrics are computed per agent over the prediction horizon, averaged over
the agents of a scene, and scene reports are averaged into a final table.
Everything is stateless and embarrassingly parallel across samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError
from .numcore import Tensor, no_grad
from .uncertainty import gaussian_nll

REPORT_COLUMNS = ("ADE", "FDE", "MR", "APDE", "ANLL", "FNLL")

MISS_THRESHOLD_M = 2.0


@dataclass
class MetricReport:
    ade: float
    fde: float
    mr: float
    apde: float
    anll: Optional[float]
    fnll: Optional[float]
    count: int = 1


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def compute_metrics(pred, truth, miss_threshold: float = MISS_THRESHOLD_M) -> MetricReport:
    """Metrics for one scene.

    ``pred`` is a PredictionResult-like object with ``positions`` (A, H, 2)
    and optional ``covariances`` (A, H, 2, 2); ``truth`` is (A, H, 2) ground
    truth positions over the same horizon.  A final displacement strictly
    above the threshold counts as a miss; exactly on it counts as a hit.
    """
    pred_pos = _as_array(pred.positions if hasattr(pred, "positions") else pred)
    truth = _as_array(truth)
    if pred_pos.shape != truth.shape:
        raise ContractError(
            f"prediction {pred_pos.shape} and truth {truth.shape} are misaligned")
    if pred_pos.ndim != 3 or pred_pos.shape[1] < 1:
        raise ContractError("expected (agents, horizon >= 1, 2) positions")

    err = np.linalg.norm(pred_pos - truth, axis=2)        # (A, H)
    ade_per_agent = err.mean(axis=1)
    fde_per_agent = err[:, -1]
    # nearest sampled ground-truth point, per predicted point
    gaps = np.linalg.norm(pred_pos[:, :, None, :] - truth[:, None, :, :], axis=3)
    apde_per_agent = gaps.min(axis=2).mean(axis=1)

    covs = getattr(pred, "covariances", None)
    anll = fnll = None
    if covs is not None:
        covs = _as_array(covs)
        with no_grad():
            nll = gaussian_nll(truth, pred_pos, covs).data   # (A, H)
        anll = float(nll.mean(axis=1).mean())
        fnll = float(nll[:, -1].mean())

    return MetricReport(
        ade=float(ade_per_agent.mean()),
        fde=float(fde_per_agent.mean()),
        mr=float((fde_per_agent > miss_threshold).mean()),
        apde=float(apde_per_agent.mean()),
        anll=anll,
        fnll=fnll,
        count=1,
    )


def aggregate_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Mean of per-scene reports; likelihoods aggregate only if all have them."""
    if not reports:
        raise ContractError("nothing to aggregate")
    has_nll = all(r.anll is not None for r in reports)
    return MetricReport(
        ade=float(np.mean([r.ade for r in reports])),
        fde=float(np.mean([r.fde for r in reports])),
        mr=float(np.mean([r.mr for r in reports])),
        apde=float(np.mean([r.apde for r in reports])),
        anll=float(np.mean([r.anll for r in reports])) if has_nll else None,
        fnll=float(np.mean([r.fnll for r in reports])) if has_nll else None,
        count=sum(r.count for r in reports),
    )


def report_table(rows: Sequence[tuple[str, MetricReport]]) -> str:
    """UTF-8 tab-separated table; one row per (label, report)."""
    lines = ["model\t" + "\t".join(REPORT_COLUMNS)]
    for label, r in rows:
        cells = [label]
        for value in (r.ade, r.fde, r.mr, r.apde, r.anll, r.fnll):
            cells.append("-" if value is None else f"{value:.6f}")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# open-loop baselines


def cv_predict(last_state, horizon: int, dt: float) -> np.ndarray:
    """Constant-velocity positions p_k = p0 + k dt v0, k = 1..H."""
    if horizon < 1:
        raise ContractError("horizon must be at least one step")
    s = np.asarray(last_state, dtype=np.float64)
    steps = np.arange(1, horizon + 1)[:, None] * dt
    return s[:2][None, :] + steps * s[2:4][None, :]


def ca_predict(last_state, last_accel, horizon: int, dt: float) -> np.ndarray:
    """Constant-acceleration positions p_k = p0 + k dt v0 + (k dt)^2 a0 / 2."""
    if horizon < 1:
        raise ContractError("horizon must be at least one step")
    s = np.asarray(last_state, dtype=np.float64)
    a = np.asarray(last_accel, dtype=np.float64)
    steps = np.arange(1, horizon + 1)[:, None] * dt
    return s[:2][None, :] + steps * s[2:4][None, :] + 0.5 * steps * steps * a[None, :]


def estimate_acceleration(observed_states, dt: float) -> np.ndarray:
    """Acceleration from the last two observed velocity samples."""
    obs = np.asarray(observed_states, dtype=np.float64)
    if obs.shape[0] < 2:
        return np.zeros(2)
    return (obs[-1, 2:4] - obs[-2, 2:4]) / dt


def baseline_positions(kind: str, observed_states, horizon: int, dt: float) -> np.ndarray:
    """Baseline forecasts for every agent: (A, T_obs, 4) -> (A, H, 2)."""
    obs = np.asarray(observed_states, dtype=np.float64)
    out = np.zeros((obs.shape[0], horizon, 2))
    for i in range(obs.shape[0]):
        if kind == "cv":
            out[i] = cv_predict(obs[i, -1], horizon, dt)
        elif kind == "ca":
            accel = estimate_acceleration(obs[i], dt)
            out[i] = ca_predict(obs[i, -1], accel, horizon, dt)
        else:
            raise ContractError(f"unknown baseline {kind!r}")
    return out
