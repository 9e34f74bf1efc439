from __future__ import annotations

import math

import numpy as np
import pytest

from regprobe import fields, modulus
from regprobe.errors import (
    DomainError,
    ExponentError,
    FieldValidationError,
    RegistryError,
)


def polar_integral(g, r, nr=1000, ntheta=1000):
    # midpoint product rule in (radius, angle); the reference oracle for ball
    # integrals in this file
    rr = (np.arange(nr) + 0.5) * (r / nr)
    tt = (np.arange(ntheta) + 0.5) * (2.0 * np.pi / ntheta)
    rg, tg = np.meshgrid(rr, tt, indexing="ij")
    pts = np.stack([(rg * np.cos(tg)).ravel(), (rg * np.sin(tg)).ravel()], axis=1)
    vals = np.asarray(g(pts)).reshape(nr, ntheta)
    return float(np.sum(vals * rg) * (r / nr) * (2.0 * np.pi / ntheta))


def diag_field(d1, d2, lam):
    def a_fn(pts):
        out = np.zeros((len(pts), 2, 2))
        out[:, 0, 0] = d1
        out[:, 1, 1] = d2
        return out

    return fields.CoefficientField(
        a=a_fn, b=lambda pts: np.zeros((len(pts), 2)),
        ellipticity=lam, drift_bound=0.0, q=4.0)


def test_field_constructor_validation():
    zero_b = lambda pts: np.zeros((len(pts), 2))
    with pytest.raises(FieldValidationError):
        fields.CoefficientField(a=fields._identity_matrix_field, b=zero_b,
                                ellipticity=1.5, drift_bound=0.0, q=4.0)
    with pytest.raises(ExponentError):
        fields.CoefficientField(a=fields._identity_matrix_field, b=zero_b,
                                ellipticity=1.0, drift_bound=0.0, q=2.0)
    with pytest.raises(FieldValidationError):
        fields.CoefficientField(a=fields._identity_matrix_field, b=zero_b,
                                ellipticity=1.0, drift_bound=0.0, q=4.0, n=3)


def test_check_ellipticity_identity():
    rep = fields.check_ellipticity(fields.make_field("identity"), 256)
    assert rep.passed
    assert rep.min_ratio == pytest.approx(1.0, abs=1e-12)
    assert rep.max_ratio == pytest.approx(1.0, abs=1e-12)


def test_check_ellipticity_diagonal_pass_and_fail():
    rep = fields.check_ellipticity(diag_field(2.0, 0.5, 0.5), 400)
    assert rep.passed
    assert rep.min_ratio >= 0.5 - 1e-12
    assert rep.max_ratio <= 2.0 + 1e-12

    rep = fields.check_ellipticity(diag_field(3.0, 1.0, 0.5), 400)
    assert not rep.passed
    assert rep.max_ratio > 2.0


def test_check_ellipticity_rejects_asymmetric():
    def a_fn(pts):
        out = np.zeros((len(pts), 2, 2))
        out[:, 0, 0] = 1.0
        out[:, 1, 1] = 1.0
        out[:, 0, 1] = 0.25
        return out

    bad = fields.CoefficientField(a=a_fn, b=lambda pts: np.zeros((len(pts), 2)),
                                  ellipticity=0.5, drift_bound=0.0, q=4.0)
    with pytest.raises(FieldValidationError):
        fields.check_ellipticity(bad, 128)
    with pytest.raises(ValueError):
        fields.check_ellipticity(fields.make_field("identity"), 50)


def test_ln_distance_radial_lipschitz_closed_form():
    # a = (1+|x|) I gives entry distance (pi/2)^(1/2) r^2
    field = fields.make_field("radial_lipschitz:1")
    for r in (0.25, 0.5, 1.0):
        rep = fields.ln_distance(field, (0.0, 0.0), r)
        expect = r * r * math.sqrt(math.pi / 2.0)
        assert rep.value == pytest.approx(expect, rel=1e-3)
        assert rep.per_entry[0][0] == pytest.approx(expect, rel=1e-3)
        assert rep.per_entry[0][1] == 0.0


def test_ln_distance_identity_zero():
    field = fields.make_field("identity")
    for r in (0.1, 0.5, 1.0):
        assert fields.ln_distance(field, (0.1, -0.2), r).value == 0.0


def test_ln_distance_matches_fine_quadrature():
    def a_fn(pts):
        scale = 1.0 + np.sin(5.0 * pts[:, 0]) / 10.0
        return fields._scalar_times_identity(scale)

    field = fields.CoefficientField(a=a_fn, b=lambda pts: np.zeros((len(pts), 2)),
                                    ellipticity=0.9, drift_bound=0.0, q=4.0)
    r = 0.25
    rep = fields.ln_distance(field, (0.0, 0.0), r)
    oracle = math.sqrt(polar_integral(lambda pts: (np.sin(5.0 * pts[:, 0]) / 10.0) ** 2, r))
    assert abs(rep.value - oracle) < 1e-4


def test_ln_distance_monotone_in_r():
    field = fields.make_field("dini_log:2")
    radii = np.linspace(0.05, 1.0, 8)
    vals = [fields.ln_distance(field, (0.0, 0.0), float(r)).value for r in radii]
    assert all(b >= a - 1e-14 for a, b in zip(vals, vals[1:]))


def test_ln_distance_domain_error():
    field = fields.CoefficientField(
        a=fields._identity_matrix_field, b=lambda pts: np.zeros((len(pts), 2)),
        ellipticity=1.0, drift_bound=0.0, q=4.0, domain_radius=1.0)
    with pytest.raises(DomainError):
        fields.ln_distance(field, (0.5, 0.0), 0.75)


def test_builtin_family_ratio_below_nu():
    for nu in (0.1, 0.3):
        field = fields.make_field(f"radial_lipschitz:{nu}")
        for r in (0.1, 0.3, 0.5, field.r0):
            rep = fields.ln_distance(field, (0.0, 0.0), r)
            assert rep.value <= nu * r * (1.0 + 1e-3)


def test_pointwise_fit_lipschitz_exact():
    g = lambda pts: np.hypot(pts[:, 0], pts[:, 1])
    radii = [0.5 ** k for k in range(6)]
    rep = fields.pointwise_modulus_fit(g, (0.0, 0.0), radii, samples=20000)
    assert rep.radii[0] > rep.radii[-1]
    assert all(a > b for a, b in zip(rep.radii, rep.radii[1:]))
    for r, v in zip(rep.radii, rep.values):
        assert v == pytest.approx(r, rel=1e-12)
    assert rep.fitted_nu == pytest.approx(1.0, rel=1e-12)


def test_pointwise_fit_log_inverse():
    def g(pts):
        s = np.hypot(pts[:, 0], pts[:, 1])
        out = np.zeros(len(pts))
        mask = s > 1e-300
        out[mask] = np.where(s[mask] >= 1.0 / math.e, 1.0,
                             1.0 / np.log(1.0 / np.minimum(s[mask], 0.999)))
        return out

    ref = modulus.log_inverse()
    radii = [ref.r_max * 0.5 ** k for k in range(8)]
    rep = fields.pointwise_modulus_fit(g, (0.0, 0.0), radii, reference=ref)
    for r, v in zip(rep.radii, rep.values):
        assert v == pytest.approx(ref.eval(r), abs=1e-3)
    assert rep.fitted_nu == pytest.approx(1.0, abs=1e-3)


def test_pointwise_fit_constant_zero():
    g = lambda pts: np.full(len(pts), 3.7)
    rep = fields.pointwise_modulus_fit(g, (0.2, 0.1), [0.4, 0.2, 0.1], samples=5000)
    assert rep.values == (0.0, 0.0, 0.0)
    assert rep.fitted_nu == 0.0


def test_lq_norm_examples():
    c = 0.7
    val = fields.lq_norm(lambda pts: np.full(len(pts), c), 4.0)
    assert val == pytest.approx(c * math.pi ** 0.25, rel=1e-4)
    assert fields.lq_norm(lambda pts: np.zeros(len(pts)), 4.0) == 0.0
    val = fields.lq_norm(lambda pts: pts[:, 0], 4.0)
    assert val == pytest.approx((math.pi / 8.0) ** 0.25, rel=1e-4)
    with pytest.raises(ExponentError):
        fields.lq_norm(lambda pts: pts[:, 0], 2.0)


def test_drift_norm_consistency():
    field = fields.make_field("identity", "constant:0.3,0.4", q=4.0)
    total = fields.drift_norm_total(field)
    assert total == pytest.approx(field.drift_bound, rel=1e-3)
    assert total <= field.drift_bound * (1.0 + 1e-3)

    spike = fields.make_field("identity", "lq_spike:4")
    assert spike.q == 4.0
    total = fields.drift_norm_total(spike)
    assert total == pytest.approx(spike.drift_bound, rel=2e-2)


def test_verify_nonlinearity_sqrt_dini_passes():
    nl = fields.parse_nonlinearity("sqrt_dini")
    rep = fields.verify_nonlinearity(nl, 2000)
    assert rep.passed
    assert rep.max_violation <= 1e-10
    assert rep.sup_excess <= 1e-12


def test_verify_nonlinearity_signed_sqrt_fails():
    # the signed square root breaks its own modulus across t = 0:
    # |f(eps) - f(-eps)| = 2 sqrt(eps) > sqrt(2 eps)
    def f_fn(pts, t):
        tt = np.broadcast_to(np.asarray(t, dtype=float), (len(pts),))
        return np.sign(tt) * np.sqrt(np.minimum(np.abs(tt), 1.0))

    nl = fields.Nonlinearity(f_fn, modulus.power(0.5, r_max=1.0), 1.0)
    rep = fields.verify_nonlinearity(nl, 4000)
    assert not rep.passed
    assert rep.max_violation > 0.01


def test_verify_nonlinearity_quadratic_fails():
    def f_fn(pts, t):
        tt = np.broadcast_to(np.asarray(t, dtype=float), (len(pts),))
        return tt ** 2

    nl = fields.Nonlinearity(f_fn, modulus.power(1.0, r_max=4.0), 16.0)
    rep = fields.verify_nonlinearity(nl, 2000)
    assert not rep.passed


def test_verify_nonlinearity_t_independent_passes():
    def f_fn(pts, t):
        return np.cos(pts[:, 0]) * pts[:, 1]

    nl = fields.Nonlinearity(f_fn, modulus.zero_modulus(), 1.0)
    rep = fields.verify_nonlinearity(nl, 1500)
    assert rep.passed
    assert rep.max_violation <= 0.0


def test_verify_nonlinearity_sup_bound():
    nl = fields.Nonlinearity(lambda pts, t: np.full(len(pts), 5.0),
                             modulus.zero_modulus(), 4.0)
    rep = fields.verify_nonlinearity(nl, 1200)
    assert not rep.passed
    assert rep.sup_excess == pytest.approx(1.0)


def quad_plus_harmonic_potential(f0):
    # solves Laplacian v = f0 with v(x0) = 0, Dv(x0) = 0; the harmonic part
    # exercises the second-difference residual at finite h
    def v(x0, t, pts):
        d = pts - x0
        quad = 0.25 * f0 * (d[:, 0] ** 2 + d[:, 1] ** 2)
        harm = np.sin(d[:, 0]) * np.sinh(d[:, 1])
        return quad + harm

    return fields.PotentialFamily(v=v, hessian_bound=0.5 * f0 + 2.0,
                                  provenance="closed_form")


def test_potential_residual_order():
    field = fields.make_field("identity")
    nl = fields.parse_nonlinearity("const:4")
    pf = quad_plus_harmonic_potential(4.0)
    r1 = fields.potential_residual(pf, field, nl, (0.0, 0.0), 0.0, h=1.0 / 32.0)
    r2 = fields.potential_residual(pf, field, nl, (0.0, 0.0), 0.0, h=1.0 / 64.0)
    order = math.log2(r1 / r2)
    assert order >= 1.8
    assert fields.hessian_sup_estimate(pf, (0.0, 0.0), 0.0, h=1.0 / 64.0) <= pf.hessian_bound


def test_potential_pure_quadratic_exact():
    def v(x0, t, pts):
        d = pts - x0
        return d[:, 0] ** 2 + d[:, 1] ** 2

    pf = fields.PotentialFamily(v=v, hessian_bound=2.0, provenance="closed_form")
    field = fields.make_field("identity")
    nl = fields.parse_nonlinearity("const:4")
    res = fields.potential_residual(pf, field, nl, (0.0, 0.0), 0.0, h=1.0 / 16.0)
    assert res <= 1e-11
    with pytest.raises(FieldValidationError):
        fields.PotentialFamily(v=v, hessian_bound=2.0, provenance="guessed")


def test_registry_ids():
    f = fields.make_field("radial_lipschitz:0.5", "constant:1,0", q=4.0)
    assert f.ellipticity == pytest.approx(1.0 / 1.5)
    assert f.drift_bound == pytest.approx(math.pi ** 0.25)
    assert f.a_modulus is not None and f.a_modulus.family == "power"

    f = fields.make_field("dini_log:2")
    assert f.a_modulus.family == "log_power"
    assert f.r0 == pytest.approx(math.exp(-2.0))

    nl = fields.parse_nonlinearity("const:-2.5")
    assert nl.sup_bound == 2.5
    assert float(nl.eval(np.zeros((3, 2)), 7.0)[0]) == -2.5

    for bad in ["identity:1", "mystery", "radial_lipschitz:", "radial_lipschitz:x"]:
        with pytest.raises(RegistryError):
            fields.parse_coefficients(bad)
    for bad in ["zero:1", "constant:1", "constant:a,b", "spiral"]:
        with pytest.raises((RegistryError, ExponentError)):
            fields.parse_drift(bad, 4.0)
    for bad in ["sqrt_dini:1", "const:", "unknown"]:
        with pytest.raises(RegistryError):
            fields.parse_nonlinearity(bad)
