"""Multiscale probe tests.

Closed-form oracles throughout: harmonic replacements of quadratics are
known exactly, the constant-drift solution has a Bessel-series gradient at
the origin, and the cubic gap's single ladder step can be computed by hand
(the harmonic extension of x1^3 boundary data on the 3/4 circle has linear
part (9/64) x1, orthogonal to the cos(3 theta) mode on any centered disk).
"""
from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from dataclasses import replace
from scipy.special import iv

from regprobe.campanato import (
    CertificateReport,
    IterationConfig,
    IterationTrace,
    LinearApprox,
    QuadApprox,
    ScaleRecord,
    approximate,
    ball_sup,
    c1_probe,
    c11_probe,
    calibrate_constants,
    certificate,
    perturbation_sweep,
    taylor_fit,
    trace_to_csv,
    verify_recurrence,
)
from regprobe.elliptic import assemble, solve_dirichlet
from regprobe.errors import FieldValidationError, FitError
from regprobe.fields import Nonlinearity, PotentialFamily
from regprobe.grid import DiscreteField, DiskGrid
from regprobe.manufactured import get_problem

CAL = dict(C0=2.56, C1=0.0175, C2=0.036, alpha=0.19, beta=0.47)


def sampled_field(fn, cells=32, radius=1.0):
    grid = DiskGrid((0.0, 0.0), radius, radius / cells)
    return grid.field_from_function(fn, "solution")


def make_trace(M, xi, eta, mode="c1", cfg=None, N=None):
    cfg = cfg or IterationConfig(K=max(1, len(M) - 1), **CAL)
    approx = LinearApprox(0.0, np.zeros(2))
    S = np.cumsum(M)
    N = M if N is None else N
    records = []
    for k in range(len(M)):
        x = xi[k] if k < len(xi) else math.nan
        e = eta[k] if k < len(eta) else math.nan
        records.append(ScaleRecord(
            k=k, scale=cfg.lam ** k, M=M[k], xi=x, eta=e, S=float(S[k]),
            N=N[k], approx=approx, recurrence_ok=None, margin=None,
            diagnostics={},
        ))
    return IterationTrace(mode=mode, records=tuple(records), limit=approx,
                          config=cfg, truncated=False, flags={})


def test_approximants_evaluate():
    L = LinearApprox(1.0, (2.0, -1.0))
    assert L(np.array([[1.0, 1.0]]))[0] == pytest.approx(2.0)
    P = QuadApprox(1.0, (0.0, 0.0), [[1.0, 0.5], [0.5, -1.0]])
    assert P(np.array([[1.0, 2.0]]))[0] == pytest.approx(1.0 + 1.0 + 2.0 - 4.0)
    assert P.frozen_trace(np.eye(2)) == pytest.approx(0.0)


def test_approximant_validation():
    with pytest.raises(FieldValidationError):
        LinearApprox(math.nan, (0.0, 0.0))
    with pytest.raises(FieldValidationError):
        QuadApprox(0.0, (0.0, 0.0), [[0.0, 1.0], [0.0, 0.0]])


def test_approximate_harmonic_quadratic_is_reproduced():
    _, gap = approximate(lambda p: p[:, 0] ** 2 - p[:, 1] ** 2, np.eye(2))
    assert gap <= 1e-9


def test_approximate_paraboloid_gap_is_exact():
    h, gap = approximate(lambda p: p[:, 0] ** 2 + p[:, 1] ** 2, np.eye(2))
    assert np.max(np.abs(h.values - 9.0 / 16.0)) <= 1e-9
    assert gap == pytest.approx(9.0 / 16.0, abs=1e-9)


def test_approximate_accepts_discrete_field():
    w = sampled_field(lambda p: p[:, 0] ** 2 - p[:, 1] ** 2, cells=48)
    _, gap = approximate(w, np.eye(2))
    assert gap <= 1e-9


def test_taylor_fit_order1_exact():
    h = sampled_field(
        lambda p: 3.0 + 2.0 * p[:, 0] - p[:, 1] + p[:, 0] * p[:, 1])
    L = taylor_fit(h, (0.0, 0.0), 0.25, 1)
    assert L.A == pytest.approx(3.0, abs=1e-9)
    assert np.allclose(L.B, [2.0, -1.0], atol=1e-9)


def test_taylor_fit_order2_exact():
    h = sampled_field(
        lambda p: 3.0 + 2.0 * p[:, 0] - p[:, 1] + p[:, 0] * p[:, 1])
    P = taylor_fit(h, (0.0, 0.0), 0.25, 2)
    assert P.E == pytest.approx(3.0, abs=1e-9)
    assert np.allclose(P.F, [2.0, -1.0], atol=1e-9)
    assert np.allclose(P.G, [[0.0, 0.5], [0.5, 0.0]], atol=1e-9)


def test_taylor_fit_trace_projection_keeps_harmonic_hessian():
    h = sampled_field(lambda p: p[:, 0] ** 2 - p[:, 1] ** 2)
    P = taylor_fit(h, (0.0, 0.0), 0.25, 2)
    assert np.allclose(P.G, np.diag([1.0, -1.0]), atol=1e-9)


def test_taylor_fit_projection_removes_frozen_trace():
    h = sampled_field(lambda p: p[:, 0] ** 2 + p[:, 1] ** 2)
    P = taylor_fit(h, (0.0, 0.0), 0.25, 2)
    assert abs(P.frozen_trace(np.eye(2))) <= 1e-9


def test_taylor_fit_rejects_narrow_radius():
    h = sampled_field(lambda p: p[:, 0], cells=32)
    with pytest.raises(FitError):
        taylor_fit(h, (0.0, 0.0), 3.0 * h.grid.h, 1)


def test_taylor_fit_rejects_rank_deficient_sample():
    grid = DiskGrid((0.0, 0.0), 1.0, 1.0 / 32)
    line = np.stack([np.linspace(-0.3, 0.3, 25), np.zeros(25)], axis=1)
    h = DiscreteField(grid, line[:, 0], "solution", points=line)
    with pytest.raises(FitError):
        taylor_fit(h, (0.0, 0.0), 0.25, 1)


def test_config_validation():
    with pytest.raises(ValueError):
        IterationConfig(lam=0.25)
    with pytest.raises(ValueError):
        IterationConfig(lam=0.0)
    with pytest.raises(ValueError):
        IterationConfig(C1=0.7, lam=0.2)
    with pytest.raises(ValueError):
        IterationConfig(alpha=1.5)
    with pytest.raises(ValueError):
        IterationConfig(nu=-0.1)
    with pytest.raises(ValueError):
        IterationConfig(enforce_smallness="maybe")


def test_smallness_flag_recorded_and_enforceable():
    drift = get_problem("drift_c1")
    tr = c1_probe(drift, IterationConfig(K=1, **CAL))
    assert tr.flags["smallness"]["ok"] is False
    with pytest.raises(ValueError):
        c1_probe(drift, IterationConfig(K=1, enforce_smallness="error", **CAL))


def test_zero_case_certifies_at_machine_precision():
    tr = c1_probe(get_problem("zero_case"), IterationConfig(K=6, **CAL))
    assert np.all(tr.M_values <= 1e-8)
    assert certificate(tr).verdict == "C1_certified"
    rep = verify_recurrence(tr)
    assert rep.ok_fraction == 1.0
    assert all(math.isinf(m) for m in rep.margins)


def test_drift_ladder_contracts_and_certifies():
    tr = c1_probe(get_problem("drift_c1"), IterationConfig(K=6, **CAL))
    M = tr.M_values
    assert np.all(M[2:] / M[1:-1] <= 0.5)
    N = tr.N_values
    assert np.all(np.diff(N[2:]) < 0.0)
    assert N[6] <= 1e-3
    b5 = tr.records[5].approx.B
    b6 = tr.records[6].approx.B
    assert np.linalg.norm(b6 - b5) <= 1e-4
    assert certificate(tr).verdict == "C1_certified"
    assert verify_recurrence(tr).ok_fraction >= 0.95


def test_drift_limit_gradient_matches_bessel_series():
    tr = c1_probe(get_problem("drift_c1"), IterationConfig(K=6, **CAL))
    c0 = iv(2, 0.5) / iv(0, 0.5)
    c1 = (iv(1, 0.5) + iv(3, 0.5)) / iv(1, 0.5)
    expected = c1 / 4.0 - c0 / 2.0
    assert tr.limit.B[0] == pytest.approx(expected, abs=2e-6)
    assert tr.limit.B[1] == pytest.approx(0.0, abs=1e-9)
    assert tr.flags["u_shift"] == pytest.approx(c0, abs=1e-12)


def test_cubic_first_increment_matches_hand_computation():
    beta = 0.1
    tr = c11_probe(get_problem("cubic_c11"), IterationConfig(K=2, **CAL))
    inc = tr.records[0].diagnostics["increment"]
    assert inc.F[0] == pytest.approx(-beta * (0.75 ** 2) / 4.0, abs=1e-5)
    assert abs(inc.E) <= 1e-8
    assert np.max(np.abs(inc.G)) <= 1e-8


def test_cubic_ladder_decays_at_scale_rate():
    tr = c11_probe(get_problem("cubic_c11"), IterationConfig(K=6, **CAL))
    M = tr.M_values[:6]
    logs = np.log(M)
    denom = math.log(IterationConfig(**CAL).lam)
    slopes = [
        (logs[l] - logs[k]) / ((l - k) * denom)
        for k in range(6) for l in range(k + 1, 6)
    ]
    assert float(np.median(slopes)) >= 0.9
    for rec in tr.records:
        assert abs(rec.approx.frozen_trace(np.eye(2))) <= 1e-9
    assert certificate(tr).verdict == "C11_certified"
    assert verify_recurrence(tr).ok_fraction >= 0.95


def test_nondini_ladder_stalls_and_fails():
    tr = c11_probe(get_problem("nondini_c11"), IterationConfig(K=26, **CAL))
    M = tr.M_values
    ratios = M[-4:] / M[-5:-1]
    assert np.all(ratios > 0.95)
    cert = certificate(tr)
    assert cert.verdict == "failed"
    assert cert.stalled


def test_recurrence_check_on_synthetic_values():
    tr = make_trace(M=[1.0, 0.2, 0.05], xi=[0.25, 0.25], eta=[0.01, 0.005])
    rep = verify_recurrence(tr)
    assert rep.ok == (True, True)
    assert rep.margins[0] == pytest.approx(1.5 * 0.26 - 0.2)
    assert rep.margins[1] == pytest.approx(1.5 * 0.055 - 0.05)
    strict = verify_recurrence(tr, safety=1.0)
    assert strict.ok == (True, True)
    assert verify_recurrence(tr, safety=0.1).ok == (False, False)


def test_certificate_on_synthetic_geometric_decay():
    M = [2.0 ** -k for k in range(10)]
    N = [4.0 ** -k for k in range(10)]
    tr = make_trace(M=M, xi=[0.5] * 9, eta=[0.0] * 9, N=N,
                    cfg=IterationConfig(K=9, cert_tol=1e-2, **CAL))
    cert = certificate(tr)
    assert cert.verdict == "C1_certified"
    assert cert.tail_monotone and cert.sum_plateau and not cert.stalled


def test_certificate_all_zero_is_certified():
    tr = make_trace(M=[0.0] * 5, xi=[0.0] * 4, eta=[0.0] * 4)
    cert = certificate(tr)
    assert cert.verdict == "C1_certified"
    assert cert.final_n == 0.0


def test_certificate_truncated_is_inconclusive():
    tr = make_trace(M=[1.0, 0.1, 0.01], xi=[0.1, 0.1], eta=[0.0, 0.0])
    tr = replace(tr, truncated=True)
    assert certificate(tr).verdict == "inconclusive"


def test_certificate_stall_detector_needs_slow_tail():
    slow = make_trace(M=[1.0 / (k + 1.0) for k in range(40)],
                      xi=[0.5] * 39, eta=[0.0] * 39)
    assert certificate(slow).verdict == "failed"
    fast = make_trace(M=[0.3 ** k for k in range(20)],
                      xi=[0.5] * 19, eta=[0.0] * 19,
                      N=[0.3 ** k for k in range(20)])
    assert certificate(fast).verdict == "C1_certified"


def test_rescaling_changes_nothing_beyond_roundoff():
    def w(p):
        return np.sin(p[:, 0]) * np.exp(p[:, 1]) - 1.0

    lam = 0.2
    direct, _ = ball_sup(w, lam, cells=40)

    def rescaled(z):
        z = np.atleast_2d(z)
        return w(z * lam) / lam ** 2

    scaled, _ = ball_sup(rescaled, 1.0, cells=40)
    assert abs(direct - scaled * lam ** 2) <= 1e-12


def test_telescoping_and_partial_sums_are_exact():
    cfg = IterationConfig(K=5, **CAL)
    tr = c1_probe(get_problem("drift_c1"), cfg)
    A = 0.0
    B = np.zeros(2)
    for rec in tr.records[:-1]:
        inc = rec.diagnostics["increment"]
        scale = cfg.lam ** rec.k
        A = A + scale * scale * inc.A
        B = B + scale * inc.B
    assert A == tr.limit.A
    assert np.array_equal(B, tr.limit.B)
    S = 0.0
    for rec in tr.records:
        S = S + rec.M
        assert rec.S == S


def test_scalar_rescaling_invariance():
    base = get_problem("drift_c1")
    cfg = IterationConfig(K=4, **CAL)
    tr0 = c1_probe(base, cfg)
    for s in (0.1, 10.0):
        nl = base.nonlinearity
        scaled = replace(
            base,
            nonlinearity=Nonlinearity(
                f=lambda pts, t, s=s: s * nl.f(pts, np.asarray(t) / s),
                modulus=nl.modulus, sup_bound=s * nl.sup_bound,
                label="scaled"),
            u=lambda pts, s=s: s * np.asarray(base.u(pts)),
            potential=PotentialFamily(
                v=lambda x0, t, pts, s=s: s * np.asarray(
                    base.potential.v(x0, t, pts)),
                hessian_bound=s * base.potential.hessian_bound,
                provenance="closed_form"),
        )
        trs = c1_probe(scaled, cfg)
        for r0, rs in zip(tr0.records, trs.records):
            assert rs.M == pytest.approx(s * r0.M, rel=1e-9, abs=1e-300)
            if not math.isnan(r0.xi):
                assert rs.xi == r0.xi
                assert rs.eta == pytest.approx(s * r0.eta, rel=1e-9)
        assert np.allclose(trs.limit.B, s * tr0.limit.B, rtol=1e-9)
        assert verify_recurrence(trs).ok == verify_recurrence(tr0).ok
        assert certificate(trs).verdict == certificate(tr0).verdict


def test_numeric_mode_truncates_at_scale_floor():
    drift = get_problem("drift_c1")
    grid = DiskGrid((0.0, 0.0), 1.0, 1.0 / 64)
    op = assemble(drift.field, grid)
    rhs = grid.field_from_function(lambda p: np.full(len(p), 4.0))
    bc = grid.boundary_from_function(lambda p: np.ones(len(p)))
    u = solve_dirichlet(op, rhs, bc)
    tr = c1_probe(drift, IterationConfig(K=6, **CAL), u=u)
    assert tr.truncated
    assert tr.flags["data_mode"] == "numeric"
    assert len(tr.records) == 1
    assert tr.flags["scale_floor_k"] == 1
    assert tr.records[0].diagnostics["measure_radius"] < 1.0
    closed = c1_probe(drift, IterationConfig(K=1, **CAL))
    assert tr.records[0].M == pytest.approx(closed.records[0].M, rel=1e-3)
    assert certificate(tr).verdict == "inconclusive"


def test_trace_csv_schema_and_roundtrip(tmp_path):
    tr = c1_probe(get_problem("drift_c1"), IterationConfig(K=3, **CAL))
    path = tmp_path / "trace.csv"
    trace_to_csv(tr, path)
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["k", "scale", "M_k", "xi_k", "eta_k", "S_k", "N_k",
                       "A", "B1", "B2"]
    assert len(rows) == 5
    assert rows[1][0] == "0"
    assert float(rows[1][2]) == tr.records[0].M
    assert rows[-1][3] == "nan" and rows[-1][4] == "nan"
    assert float(rows[-1][8]) == tr.records[-1].approx.B[0]

    tr2 = c11_probe(get_problem("cubic_c11"), IterationConfig(K=2, **CAL))
    path2 = tmp_path / "trace2.csv"
    trace_to_csv(tr2, path2)
    with path2.open() as fh:
        header = next(csv.reader(fh))
    assert header == ["k", "scale", "M_k", "xi_k", "eta_k", "S_k", "N_k",
                      "E", "F1", "F2", "G11", "G12", "G22"]


def test_perturbation_sweep_slope_is_positive():
    sweep = perturbation_sweep()
    assert sweep.slope >= 0.15
    assert np.all(np.diff(np.mean(sweep.ratios, axis=0)) > 0.0)


def test_calibration_produces_admissible_constants():
    out = calibrate_constants()
    assert 0.0 < out["alpha"] <= 1.0 / 3.0
    assert 0.0 < out["beta"] < 1.0
    assert out["alpha"] == pytest.approx(out["beta"] / (2.0 + out["beta"]))
    assert out["C0"] > 1.0
    assert 2.0 * out["C1"] * 0.2 < 0.25
    assert out["C2"] > 0.0
    assert out["holdout_slope"] >= out["alpha"] - 0.05
