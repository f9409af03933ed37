from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stalesync.core import ConsistencyConfig
from stalesync.metrics import (
    MetricsLog,
    ReadStalenessSample,
    arrivals_from_trace,
    collect,
    decompose_staleness,
    differentials,
    fmt,
    gamma_audit,
    loglog_slope,
    regret_series,
    staleness_histogram,
    time_breakdown_report,
    vap_audit,
    variance_series,
)
from stalesync.transport import DelayModel
from stalesync.workloads import LsqData, LsqWorkload, MfWorkload, planted_mf, run_workload, synthetic_lsq


@pytest.fixture(scope="module")
def lsq():
    return LsqWorkload(synthetic_lsq(5, 4000, noise=2.0, seed=3), eta0=1.0)


def test_differential_definition():
    assert ReadStalenessSample(0, c_worker=5, c_param=5).differential == -1
    assert ReadStalenessSample(0, c_worker=5, c_param=2).differential == -4


def test_histogram_normalized_and_covers_gate_range():
    h = staleness_histogram([-1, -1, -3, 0], staleness=3)
    assert h.bins.tolist() == [-4, -3, -2, -1, 0]
    assert h.counts.tolist() == [0, 1, 0, 2, 1]
    assert h.normalized.sum() == pytest.approx(1.0)
    assert h.as_dict() == {-3: 0.25, -1: 0.5, 0: 0.25}
    with pytest.raises(ValueError):
        staleness_histogram([])


def test_single_worker_point_mass(lsq):
    out = run_workload(lsq, ConsistencyConfig.ssp(0), 1, 200)
    assert staleness_histogram(differentials(out.result)).as_dict() == {-1: 1.0}
    # with s > 0 a cache hit may return a row up to s clocks old
    out = run_workload(lsq, ConsistencyConfig.ssp(3), 1, 200)
    d = differentials(out.result)
    assert min(d) >= -4 and max(d) == -1


def test_decompose_trivial_and_bound_value():
    x = np.array([1.0, 2.0])
    d = decompose_staleness(0, x, x, [np.ones(2)] * 3, n_workers=4, staleness=2)
    assert d.gamma_norm == 0.0 and d.window_size == 3
    assert d.u_bar == pytest.approx(3 * np.sqrt(2) / 20)
    assert decompose_staleness(0, x + 1, x, [], 4, 2).gamma_norm == 0.0


def test_gamma_audit_matches_brute_force_windows(lsq):
    P, s = 3, 2
    out = run_workload(lsq, ConsistencyConfig.ssp(s), P, 60, delays=DelayModel.uniform(0, 8, 4))
    tr = out.trace
    audit = gamma_audit(tr)
    ref = tr.reference()
    for t in range(len(tr)):
        c = tr.clocks[t]
        window = [tr.updates[k] for k in range(len(tr)) if c - s <= tr.clocks[k] <= c + s - 1]
        d = decompose_staleness(t, tr.views[t], ref[t], window, P, s)
        assert audit.u_bar[t] == pytest.approx(d.u_bar, rel=1e-12, abs=1e-15)
        assert audit.gamma_norm[t] == pytest.approx(d.gamma_norm, rel=1e-9, abs=1e-12)
    assert audit.bound == P * (2 * s + 1)
    assert audit.gamma_violations == 0


def test_gamma_statistics_are_sample_moments():
    from stalesync.metrics import GammaAudit

    g = GammaAudit(2, 1, np.ones(4), np.array([1.0, 2.0, 3.0, 4.0]), np.ones(4), np.ones(4), 1.0)
    assert g.mu_gamma == 2.5
    assert g.sigma_gamma == pytest.approx(np.var([1, 2, 3, 4], ddof=1))
    assert g.autocorrelation(1) == pytest.approx(0.25)


def test_regret_zero_when_started_at_optimum():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(400, 3))
    x_star = rng.normal(size=3)
    b = np.array([float(a @ x_star) for a in A])
    wl = LsqWorkload(LsqData(A, b, x_star), eta0=1.0, x0=x_star)
    out = run_workload(wl, ConsistencyConfig.ssp(1), 4, 100)
    Ts, vals = regret_series(out.trace, wl)
    assert np.allclose(vals, 0.0, atol=1e-20)


def test_regret_rejects_mf():
    wl = MfWorkload(planted_mf(10, 8, 2, 0.5, seed=0).matrix, rank=2)
    tr = wl.oracle(1, 1)
    with pytest.raises(ValueError):
        regret_series(tr, wl)


@given(st.floats(-1.5, -0.1), st.floats(0.1, 10.0))
def test_loglog_slope_recovers_power_law(alpha, scale):
    Ts = np.unique(np.logspace(1, 6, 40).astype(np.int64))
    assert loglog_slope(Ts, scale * Ts**alpha) == pytest.approx(alpha, abs=1e-9)


def test_loglog_slope_needs_points_and_positive_values():
    Ts = np.array([10, 200, 3000])
    with pytest.raises(ValueError):
        loglog_slope(Ts, np.ones(3), lo=1e4, hi=1e5)
    assert np.isnan(loglog_slope(Ts, np.array([1.0, -1.0, 1.0]), lo=1, hi=1e5))


def test_variance_series_identical_and_mismatched(lsq):
    runs = [run_workload(lsq, ConsistencyConfig.ssp(2), 2, 50, delays=DelayModel.uniform(0, 5, 1)) for _ in range(3)]
    v = variance_series([r.trace for r in runs])
    assert v.n_replicas == 3 and np.all(v.var <= 1e-30)
    short = run_workload(lsq, ConsistencyConfig.ssp(2), 2, 40).trace
    with pytest.raises(ValueError):
        variance_series([runs[0].trace, short])


def test_variance_series_against_numpy():
    from stalesync.metrics import VarianceSeries

    v = VarianceSeries(np.array([4.0, 3.0, 3.0, 5.0, 1.0]), 2)
    assert v.decreasing_fraction(0.0) == 0.75
    assert v.positive_fraction(0.0) == 1.0


def test_vap_audit_single_worker_is_minus_threshold(lsq):
    out = run_workload(lsq, ConsistencyConfig.vap(2.0), 1, 400)
    assert vap_audit(out.trace, 2.0) == pytest.approx(-2.0 / np.sqrt(400))


def test_arrivals_rebuilt_from_trace_match_server_log(lsq):
    out = run_workload(lsq, ConsistencyConfig.essp(2), 4, 80, delays=DelayModel.uniform(0, 15, 8), n_shards=1)
    assert arrivals_from_trace(out.result.trace, 1) == out.result.arrivals


def test_breakdown_report_groups_configs(lsq):
    d = DelayModel.uniform(0, 10, 3)
    r0 = run_workload(lsq, ConsistencyConfig.ssp(0), 4, 100, delays=d).result
    r5 = run_workload(lsq, ConsistencyConfig.ssp(5), 4, 100, delays=d).result
    rows = time_breakdown_report([r5, r0])
    assert [(r.staleness, r.model) for r in rows] == [(0, "SSP"), (5, "SSP")]
    assert rows[0].compute_ticks == rows[1].compute_ticks == 400
    assert rows[1].wait_ticks <= rows[0].wait_ticks


def test_fmt_is_round_trip_exact():
    for x in (0.1, 1 / 3, 1e-300, 123456789.123456789):
        assert float(fmt(x)) == x
    assert fmt(0.1) == "0.10000000000000001"


def test_csv_headers(tmp_path, lsq):
    out = run_workload(lsq, ConsistencyConfig.essp(1), 2, 120, delays=DelayModel.uniform(0, 3, 0))
    files = collect([out]).write(tmp_path)
    headers = {p.name: p.read_text().splitlines()[0] for p in files}
    assert headers == {
        "staleness.csv": "differential,count,normalized",
        "objective.csv": "clock,virtual_time,objective,squared_loss",
        "regret.csv": "T,regret_over_T",
        "gamma.csv": "t,u_bar,gamma_norm,bound",
        "variance.csv": "t,var_t",
        "breakdown.csv": "staleness,model,compute_ticks,wait_ticks",
    }
    empty = MetricsLog().write(tmp_path / "empty")
    assert all(len(p.read_text().splitlines()) == 1 for p in empty if p.name != "breakdown.csv")
