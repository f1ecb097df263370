import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ssmtraj.errors import ContractError
from ssmtraj.evaluation import (
    MetricReport,
    aggregate_reports,
    baseline_positions,
    ca_predict,
    compute_metrics,
    cv_predict,
    estimate_acceleration,
    report_table,
)
from ssmtraj.numcore import Rng
from ssmtraj.uncertainty import LOG_TWO_PI


class _Pred:
    def __init__(self, positions, covariances=None):
        self.positions = positions
        self.covariances = covariances


def _reference_metrics(pred, truth, covs=None, threshold=2.0):
    """Independent per-agent loop implementation."""
    n_agents, horizon = pred.shape[:2]
    ade, fde, apde, miss = [], [], [], []
    anll, fnll = [], []
    for a in range(n_agents):
        dists = [math.hypot(*(pred[a, k] - truth[a, k])) for k in range(horizon)]
        ade.append(sum(dists) / horizon)
        fde.append(dists[-1])
        miss.append(1.0 if dists[-1] > threshold else 0.0)
        nearest = []
        for k in range(horizon):
            nearest.append(min(math.hypot(*(pred[a, k] - truth[a, i]))
                               for i in range(horizon)))
        apde.append(sum(nearest) / horizon)
        if covs is not None:
            vals = []
            for k in range(horizon):
                e = truth[a, k] - pred[a, k]
                p = covs[a, k]
                quad = float(e @ np.linalg.solve(p, e))
                vals.append(0.5 * (quad + math.log(np.linalg.det(p))
                                   + 2 * math.log(2 * math.pi)))
            anll.append(sum(vals) / horizon)
            fnll.append(vals[-1])
    out = dict(ade=np.mean(ade), fde=np.mean(fde), mr=np.mean(miss),
               apde=np.mean(apde))
    if covs is not None:
        out["anll"] = np.mean(anll)
        out["fnll"] = np.mean(fnll)
    return out


def test_perfect_prediction_scores_zero():
    rng = Rng(1)
    truth = rng.normals((3, 8, 2))
    report = compute_metrics(_Pred(truth.copy()), truth)
    assert report.ade == report.fde == report.apde == 0.0
    assert report.mr == 0.0


def test_constant_offset_is_a_three_four_five_triangle():
    rng = Rng(2)
    truth = rng.normals((2, 6, 2))
    pred = truth + np.array([3.0, 4.0])
    report = compute_metrics(_Pred(pred), truth)
    assert report.ade == pytest.approx(5.0, abs=1e-12)
    assert report.fde == pytest.approx(5.0, abs=1e-12)
    assert report.mr == 1.0


def test_final_error_exactly_at_threshold_counts_as_hit():
    truth = np.zeros((1, 3, 2))
    pred = np.zeros((1, 3, 2))
    pred[0, -1] = [2.0, 0.0]
    report = compute_metrics(_Pred(pred), truth)
    assert report.fde == pytest.approx(2.0)
    assert report.mr == 0.0
    pred[0, -1] = [2.0 + 1e-9, 0.0]
    assert compute_metrics(_Pred(pred), truth).mr == 1.0


def test_lagging_prediction_has_zero_path_error():
    truth = np.stack([np.arange(1.0, 13.0), np.zeros(12)], axis=1)[None]
    lag = np.concatenate([truth[:, :1], truth[:, :-1]], axis=1)
    report = compute_metrics(_Pred(lag), truth)
    assert report.apde == 0.0
    assert report.ade > 0.0


def test_unit_covariance_likelihoods():
    rng = Rng(3)
    truth = rng.normals((2, 5, 2))
    covs = np.broadcast_to(np.eye(2), (2, 5, 2, 2)).copy()
    report = compute_metrics(_Pred(truth.copy(), covs), truth)
    assert report.anll == pytest.approx(LOG_TWO_PI, abs=1e-9)
    assert report.fnll == pytest.approx(LOG_TWO_PI, abs=1e-9)
    assert report.anll == pytest.approx(1.83788, abs=1e-5)


def test_matches_bruteforce_reference_on_random_instances():
    rng = Rng(4)
    for _ in range(100):
        truth = rng.normals((5, 12, 2)) * 3.0
        pred = truth + rng.normals((5, 12, 2))
        base = rng.normals((5, 12, 2, 2)) * 0.3
        covs = base @ base.transpose(0, 1, 3, 2) + 0.5 * np.eye(2)
        report = compute_metrics(_Pred(pred, covs), truth)
        ref = _reference_metrics(pred, truth, covs)
        for key in ("ade", "fde", "mr", "apde", "anll", "fnll"):
            assert abs(getattr(report, key) - ref[key]) < 1e-9, key


def test_metrics_are_rigid_transform_invariant():
    rng = Rng(5)
    truth = rng.normals((3, 7, 2)) * 4.0
    pred = truth + rng.normals((3, 7, 2))
    base = rng.normals((3, 7, 2, 2)) * 0.2
    covs = base @ base.transpose(0, 1, 3, 2) + 0.4 * np.eye(2)
    theta = 0.7
    rot = np.array([[math.cos(theta), -math.sin(theta)],
                    [math.sin(theta), math.cos(theta)]])
    shift = np.array([12.0, -7.0])
    a = compute_metrics(_Pred(pred, covs), truth)
    b = compute_metrics(
        _Pred(pred @ rot.T + shift, rot @ covs @ rot.T), truth @ rot.T + shift)
    for key in ("ade", "fde", "mr", "apde", "anll", "fnll"):
        assert abs(getattr(a, key) - getattr(b, key)) < 1e-9, key


@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_path_error_never_exceeds_displacement_error(seed):
    rng = Rng(seed)
    truth = rng.normals((2, 6, 2))
    pred = truth + rng.normals((2, 6, 2)) * 0.5
    report = compute_metrics(_Pred(pred), truth)
    assert report.apde <= report.ade + 1e-12


def test_horizon_mismatch_raises():
    with pytest.raises(ContractError):
        compute_metrics(_Pred(np.zeros((2, 5, 2))), np.zeros((2, 4, 2)))


def test_aggregation_averages_scene_reports():
    r1 = MetricReport(1.0, 2.0, 0.0, 1.0, -1.0, 0.0)
    r2 = MetricReport(3.0, 4.0, 1.0, 2.0, 1.0, 2.0)
    agg = aggregate_reports([r1, r2])
    assert agg.ade == 2.0 and agg.fde == 3.0 and agg.mr == 0.5
    assert agg.anll == 0.0 and agg.fnll == 1.0 and agg.count == 2


def test_aggregation_drops_likelihoods_when_any_report_misses_them():
    r1 = MetricReport(1.0, 2.0, 0.0, 1.0, None, None)
    r2 = MetricReport(3.0, 4.0, 1.0, 2.0, 1.0, 2.0)
    agg = aggregate_reports([r1, r2])
    assert agg.anll is None and agg.fnll is None


def test_report_table_header_and_missing_values():
    table = report_table([("cv", MetricReport(1.0, 2.0, 0.5, 0.75, None, None))])
    lines = table.splitlines()
    assert lines[0] == "model\tADE\tFDE\tMR\tAPDE\tANLL\tFNLL"
    cells = lines[1].split("\t")
    assert cells[0] == "cv" and cells[5] == "-" and cells[6] == "-"


# ----------------------------------------------------------------------
# baselines


def test_cv_zero_velocity_stays_put():
    out = cv_predict(np.array([1.0, 2.0, 0.0, 0.0]), 4, 0.1)
    assert np.allclose(out, [1.0, 2.0])


def test_cv_arithmetic_progression():
    out = cv_predict(np.array([0.0, 0.0, 1.0, 0.0]), 5, 0.04)
    assert np.allclose(out[:, 0], [0.04, 0.08, 0.12, 0.16, 0.20], atol=1e-12)
    assert np.allclose(out[:, 1], 0.0)


def test_cv_is_linear_in_velocity():
    s1 = np.array([0.0, 0.0, 1.5, -0.5])
    s2 = s1.copy()
    s2[2:] *= 2
    d1 = cv_predict(s1, 6, 0.1) - s1[:2]
    d2 = cv_predict(s2, 6, 0.1) - s2[:2]
    assert np.allclose(d2, 2 * d1, atol=1e-12)


def test_ca_with_zero_acceleration_reduces_to_cv():
    s = np.array([1.0, -1.0, 2.0, 0.5])
    assert np.array_equal(ca_predict(s, np.zeros(2), 7, 0.1), cv_predict(s, 7, 0.1))


def test_ca_half_a_t_squared():
    out = ca_predict(np.zeros(4), np.array([2.0, 0.0]), 2, 1.0)
    assert np.allclose(out[:, 0], [1.0, 4.0])
    assert np.allclose(out[:, 1], 0.0)


def test_ca_negated_acceleration_mirrors_about_cv_path():
    s = np.array([0.0, 0.0, 3.0, 1.0])
    a = np.array([1.0, -2.0])
    cv = cv_predict(s, 5, 0.2)
    up = ca_predict(s, a, 5, 0.2)
    down = ca_predict(s, -a, 5, 0.2)
    assert np.allclose(up - cv, cv - down, atol=1e-12)


def test_acceleration_estimate_from_last_two_velocities():
    obs = np.array([[0, 0, 1.0, 0.0], [0, 0, 1.5, -0.2], [0, 0, 2.0, -0.4]])
    accel = estimate_acceleration(obs, 0.5)
    assert np.allclose(accel, [1.0, -0.4])


def test_baseline_positions_shapes_and_kinds():
    rng = Rng(6)
    obs = rng.normals((3, 4, 4))
    assert baseline_positions("cv", obs, 5, 0.1).shape == (3, 5, 2)
    assert baseline_positions("ca", obs, 5, 0.1).shape == (3, 5, 2)
    with pytest.raises(ContractError):
        baseline_positions("linear", obs, 5, 0.1)
