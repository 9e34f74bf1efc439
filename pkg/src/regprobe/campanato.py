"""Multiscale polynomial approximation probes.

The certificate engine: measure how well the gap between a solution u and
its frozen-coefficient potential v is tracked by polynomials across
geometrically shrinking balls around the origin.  Each scale solves a
constant-coefficient comparison problem on the rescaled gap, fits the
comparison solution by a polynomial at the origin, folds that into the
running approximant, and records the normalized sup M_k together with the
contraction factor xi_k and forcing term eta_k that the one-step bound
M_{k+1} <= xi_k * M_k + eta_k predicts.

A run certifies first-order (mode "c1", affine approximants) or
second-order (mode "c11", quadratic approximants) behaviour at the origin
when the distance N_k to the limiting polynomial falls below tolerance
with a monotone tail.  A sup sequence that stops decaying is reported as
failed; a run cut short by the resolution floor is inconclusive.  The
probe never repairs a trace to reach a verdict.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .elliptic import assemble, constant_coeff_solve, solve_dirichlet
from .errors import (
    CalibrationError,
    FieldValidationError,
    FitError,
)
from .fields import CoefficientField, _extended_modulus, make_field
from .grid import DiscreteField, DiskGrid, bicubic_sampler
from .modulus import Modulus

_TINY_SUP = 1e-10
_STALL_RATIO = 0.95


# ---------------------------------------------------------------------------
# approximants


@dataclass(frozen=True)
class LinearApprox:
    """Affine approximant L(x) = A + B.x."""

    A: float
    B: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", float(self.A))
        object.__setattr__(self, "B", np.asarray(self.B, dtype=float).reshape(2))
        if not (math.isfinite(self.A) and np.all(np.isfinite(self.B))):
            raise FieldValidationError("approximant coefficients must be finite")

    def __call__(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return self.A + pts @ self.B


@dataclass(frozen=True)
class QuadApprox:
    """Quadratic approximant P(x) = E + F.x + x^T G x with symmetric G."""

    E: float
    F: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "E", float(self.E))
        object.__setattr__(self, "F", np.asarray(self.F, dtype=float).reshape(2))
        G = np.asarray(self.G, dtype=float).reshape(2, 2)
        if not (math.isfinite(self.E) and np.all(np.isfinite(self.F))
                and np.all(np.isfinite(G))):
            raise FieldValidationError("approximant coefficients must be finite")
        if abs(G[0, 1] - G[1, 0]) > 1e-12 * max(1.0, float(np.abs(G).max())):
            raise FieldValidationError("quadratic coefficient matrix must be symmetric")
        object.__setattr__(self, "G", 0.5 * (G + G.T))

    def __call__(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return self.E + pts @ self.F + np.einsum("ni,ij,nj->n", pts, self.G, pts)

    def frozen_trace(self, a0) -> float:
        """Value of sum_ij a0_ij * 2 G_ij, zero for admissible approximants."""
        return float(2.0 * np.sum(np.asarray(a0, dtype=float) * self.G))


def _advance(cur, inc, scale):
    """Fold a unit-ball increment fitted at scale ``lam^k`` into the approximant."""
    if isinstance(cur, LinearApprox):
        return LinearApprox(cur.A + scale * scale * inc.A, cur.B + scale * inc.B)
    return QuadApprox(cur.E + scale * scale * inc.E, cur.F + scale * inc.F,
                      cur.G + inc.G)


# ---------------------------------------------------------------------------
# configuration and trace containers


@dataclass(frozen=True)
class IterationConfig:
    """Scale ladder and calibrated constants for a probe run.

    ``lam`` and ``K`` fix the geometry; C0, C1, C2, alpha, beta come from
    ``calibrate_constants``.  ``nu`` bounds the coefficient oscillation,
    ``lambda1`` the integral drift norm (first-order mode), ``tau`` the
    uniform drift bound (second-order mode); leaving any of the three at
    None inherits the value the probed problem declares for itself.  The
    structural requirements ``0 < lam < 1/4`` and ``2 C1 lam < 1/4`` are
    hard errors; the smallness conditions on (nu, lambda1, tau) are
    recorded as flags and only enforced when ``enforce_smallness`` is
    "error".
    """

    lam: float = 0.2
    K: int = 6
    C0: float = 6.0
    C1: float = 0.05
    C2: float = 0.05
    alpha: float = 0.2
    beta: float = 0.5
    nu: float | None = None
    lambda1: float | None = None
    tau: float | None = None
    cert_tol: float = 1e-3
    safety: float = 1.5
    sub_cells: int = 32
    sup_cells: int = 48
    fit_radius: float | None = None
    solver_rtol: float = 1e-11
    enforce_smallness: str = "warn"

    def __post_init__(self):
        if not (0.0 < self.lam < 0.25):
            raise ValueError(f"scale ratio must lie in (0, 1/4), got {self.lam}")
        if not (2.0 * self.C1 * self.lam < 0.25):
            raise ValueError(
                f"need 2*C1*lam < 1/4, got C1={self.C1}, lam={self.lam}"
            )
        if self.K < 1:
            raise ValueError("need at least one scale")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        for name in ("C0", "C1", "C2", "cert_tol", "safety"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("nu", "lambda1", "tau"):
            value = getattr(self, name)
            if value is not None and value < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if self.enforce_smallness not in ("warn", "error"):
            raise ValueError("enforce_smallness must be 'warn' or 'error'")
        if self.sub_cells < 16 or self.sup_cells < 16:
            raise ValueError("resolution knobs below 16 cells are meaningless")

    def fit_radius_or_default(self) -> float:
        return self.lam if self.fit_radius is None else self.fit_radius


@dataclass(frozen=True)
class ScaleRecord:
    """One rung of the ladder: measurements with the approximant in force."""

    k: int
    scale: float
    M: float
    xi: float
    eta: float
    S: float
    N: float
    approx: LinearApprox | QuadApprox
    recurrence_ok: bool | None
    margin: float | None
    diagnostics: dict


@dataclass(frozen=True)
class IterationTrace:
    mode: str
    records: tuple
    limit: LinearApprox | QuadApprox
    config: IterationConfig
    truncated: bool
    flags: dict
    label: str = ""

    @property
    def M_values(self) -> np.ndarray:
        return np.array([r.M for r in self.records])

    @property
    def N_values(self) -> np.ndarray:
        return np.array([r.N for r in self.records])

    @property
    def S_values(self) -> np.ndarray:
        return np.array([r.S for r in self.records])


@dataclass(frozen=True)
class RecurrenceReport:
    ok: tuple
    margins: tuple
    safety: float

    @property
    def ok_fraction(self) -> float:
        return float(np.mean(self.ok)) if self.ok else 1.0


@dataclass(frozen=True)
class CertificateReport:
    verdict: str
    n_values: tuple
    final_n: float
    tail_monotone: bool
    sum_plateau: bool
    stalled: bool


@dataclass(frozen=True)
class SweepResult:
    epsilons: tuple
    shapes: tuple
    ratios: np.ndarray
    slope: float


# ---------------------------------------------------------------------------
# sup norms over balls


def ball_sup(fn, radius, cells=48, refine=3):
    """Sup of |fn| over the closed ball, with a crude resolution error bar.

    Dense lattice plus a rim ring, then a locally refined window around the
    argmax.  The bar is 2 * (fine spacing) * (local Lipschitz estimate).
    """
    step = radius / cells
    ax = np.arange(-cells, cells + 1) * step
    gx, gy = np.meshgrid(ax, ax, indexing="ij")
    mask = gx * gx + gy * gy <= radius * radius * (1.0 + 1e-12)
    pts = np.stack([gx[mask], gy[mask]], axis=1)
    ang = np.linspace(0.0, 2.0 * np.pi, 720, endpoint=False)
    ring = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    allpts = np.concatenate([pts, ring], axis=0)
    vals = np.abs(np.asarray(fn(allpts), dtype=float))
    best = int(np.argmax(vals))
    coarse_sup = float(vals[best])
    center = allpts[best]

    fine = step / refine
    w = np.arange(-2 * refine, 2 * refine + 1) * fine
    lx, ly = np.meshgrid(w, w, indexing="ij")
    local = center[None, :] + np.stack([lx.ravel(), ly.ravel()], axis=1)
    rho = np.hypot(local[:, 0], local[:, 1])
    outside = rho > radius
    if np.any(outside):
        local[outside] *= (radius / rho[outside])[:, None]
    lvals = np.abs(np.asarray(fn(local), dtype=float))
    sup = max(coarse_sup, float(lvals.max()))

    dist = np.hypot(local[:, 0] - center[0], local[:, 1] - center[1])
    near = dist > 0.0
    lip = float(np.max(np.abs(lvals[near] - coarse_sup) / dist[near])) if np.any(near) else 0.0
    return sup, 2.0 * fine * lip


def _ball_max(fn, radius, cells=24):
    step = radius / cells
    ax = np.arange(-cells, cells + 1) * step
    gx, gy = np.meshgrid(ax, ax, indexing="ij")
    mask = gx * gx + gy * gy <= radius * radius * (1.0 + 1e-12)
    pts = np.stack([gx[mask], gy[mask]], axis=1)
    return float(np.max(np.abs(np.asarray(fn(pts), dtype=float))))


# ---------------------------------------------------------------------------
# frozen-coefficient comparison and polynomial extraction


def approximate(w, a0, radius=1.0, cells=32, rtol=1e-11):
    """Compare w with the frozen-coefficient solution sharing its trace.

    Solves a0 : D^2 h = 0 on the ball of radius 3r/4 with boundary values
    taken from w, and returns (h, gap) with gap = sup over the r/2 ball of
    |w - h|.  ``w`` may be a callable or an interior DiscreteField.
    """
    w_fn = w if callable(w) else bicubic_sampler(w)
    sub = DiskGrid((0.0, 0.0), 0.75 * radius, 0.75 * radius / cells)
    h = constant_coeff_solve(a0, lambda pts: np.zeros(len(pts)), w_fn, sub,
                             rtol=rtol)
    h_fn = bicubic_sampler(h)
    gap, _ = ball_sup(lambda p: w_fn(p) - h_fn(p), 0.5 * radius,
                      cells=max(24, cells))
    return h, gap


def taylor_fit(h: DiscreteField, center, fit_radius, order, a0=None):
    """Polynomial behaviour of h at ``center`` by least squares.

    Fits over the nodes within ``fit_radius`` (which must span at least 4
    grid spacings).  For order 2 the quadratic part is projected onto the
    subspace with vanishing frozen-coefficient trace, so the returned
    QuadApprox always satisfies sum a0_ij * 2 G_ij = 0.
    """
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    grid = h.grid
    if fit_radius < 4.0 * grid.h * (1.0 - 1e-12):
        raise FitError(
            f"fit radius {fit_radius} spans fewer than 4 spacings of {grid.h}"
        )
    center = np.asarray(center, dtype=float)
    d = h.points - center[None, :]
    mask = d[:, 0] ** 2 + d[:, 1] ** 2 <= fit_radius * fit_radius
    d = d[mask]
    vals = h.values[mask]
    cols = [np.ones(len(d)), d[:, 0], d[:, 1]]
    if order == 2:
        cols += [d[:, 0] ** 2, d[:, 0] * d[:, 1], d[:, 1] ** 2]
    design = np.stack(cols, axis=1)
    sol, _, rank, _ = np.linalg.lstsq(design, vals, rcond=None)
    if rank < design.shape[1]:
        raise FitError(
            f"rank-deficient fit: {len(d)} nodes inside radius {fit_radius}"
        )
    if order == 1:
        return LinearApprox(sol[0], sol[1:3])
    G = np.array([[sol[3], 0.5 * sol[4]], [0.5 * sol[4], sol[5]]])
    a0 = np.eye(2) if a0 is None else np.asarray(a0, dtype=float)
    G = G - (np.sum(G * a0) / np.sum(a0 * a0)) * a0
    return QuadApprox(sol[0], sol[1:3], G)


# ---------------------------------------------------------------------------
# the multiscale ladder


def _resolve_solution(problem, u_data):
    if u_data is None:
        u_data = problem.u
    if isinstance(u_data, DiscreteField):
        return bicubic_sampler(u_data), u_data.grid.h

    def u_fn(pts):
        return np.asarray(u_data(np.atleast_2d(np.asarray(pts, dtype=float))),
                          dtype=float)

    return u_fn, None


def _smallness_flags(cfg: IterationConfig, mode: str, omega_a: Modulus,
                     ellipticity: float, nu: float, lambda1: float,
                     tau: float) -> dict:
    if mode == "c1":
        value = (nu + lambda1) ** cfg.alpha
        bound = cfg.lam ** 2
        return {"mode": mode, "oscillation": value, "bound": bound,
                "ok": bool(value <= bound)}
    osc = (_extended_modulus(omega_a, 1.0) + tau) ** cfg.alpha
    osc_bound = cfg.lam ** 3
    drift = tau * cfg.C0 / (2.0 * ellipticity)
    return {"mode": mode, "oscillation": osc, "bound": osc_bound,
            "drift_ratio": drift,
            "ok": bool(osc <= osc_bound and drift <= 0.25)}


def _run_ladder(problem, cfg: IterationConfig, order: int, u_data, label):
    mode = "c1" if order == 1 else "c11"
    field: CoefficientField = problem.field
    nl = problem.nonlinearity
    origin = np.zeros((1, 2))
    a0 = field.eval_a(origin)[0]
    b0 = field.eval_b(origin)[0]
    ell = field.ellipticity
    if order == 2 and a0[0, 0] < ell * (1.0 - 1e-12):
        raise FieldValidationError(
            "a11 at the origin sits below the ellipticity constant; "
            "the declared constant is wrong"
        )

    u_fn, base_h = _resolve_solution(problem, u_data)
    numeric = base_h is not None
    u_shift = float(u_fn(origin)[0])

    def v_fn(pts):
        return problem.potential.eval((0.0, 0.0), 0.0, pts)

    T = float(problem.potential.hessian_bound)
    lam = cfg.lam
    fit_radius = cfg.fit_radius_or_default()
    drift_exp = 1.0 - 2.0 / field.q
    nu = problem.nu if cfg.nu is None else cfg.nu
    lambda1 = field.drift_bound if cfg.lambda1 is None else cfg.lambda1
    tau = problem.tau if cfg.tau is None else cfg.tau
    smallness = _smallness_flags(cfg, mode, problem.omega_a, ell,
                                 nu, lambda1, tau)
    if cfg.enforce_smallness == "error" and not smallness["ok"]:
        raise ValueError(f"smallness conditions violated: {smallness}")

    # Numeric data cannot resolve balls much smaller than the grid cell;
    # stop the ladder one rung above the floor and flag the truncation.
    # At the outermost scale the interpolation stencil also cannot reach
    # the rim, so the measurement ball is pulled in by a few spacings.
    K_eff = cfg.K
    truncated = False
    safe_radius = math.inf
    if numeric:
        safe_radius = u_data.grid.radius - 3.0 * base_h
        while K_eff >= 0 and lam ** K_eff < 16.0 * base_h * (1.0 - 1e-12):
            K_eff -= 1
            truncated = True
        if K_eff < 0:
            raise FieldValidationError(
                f"grid spacing {base_h} cannot resolve even the unit scale"
            )

    if order == 1:
        approx = LinearApprox(0.0, np.zeros(2))
    else:
        approx = QuadApprox(0.0, np.zeros(2), np.zeros((2, 2)))

    rows = []
    S = 0.0
    for k in range(K_eff + 1):
        scale = lam ** k
        meas_r = min(scale, safe_radius)

        cur = approx

        def gap_fn(pts, cur=cur):
            return u_fn(pts) - u_shift - v_fn(pts) - cur(pts)

        if order == 1:
            tracked = gap_fn
        else:
            corr = float(b0 @ cur.F) / (2.0 * a0[0, 0])

            def tracked(pts, cur=cur, corr=corr):
                pts = np.atleast_2d(np.asarray(pts, dtype=float))
                return gap_fn(pts) + corr * pts[:, 0] ** 2

        sup, bar = ball_sup(tracked, meas_r, cells=cfg.sup_cells)
        M = sup / scale ** order
        S = S + M
        row = {"k": k, "scale": scale, "M": M, "S": S, "approx": cur,
               "xi": math.nan, "eta": math.nan,
               "diag": {"sup_error_bar": bar / scale ** order,
                        "measure_radius": meas_r}}
        rows.append(row)
        if k == K_eff:
            break

        def rescaled_gap(z, scale=scale):
            z = np.atleast_2d(np.asarray(z, dtype=float))
            return gap_fn(z * scale) / (scale * scale)

        h_field, gap = approximate(rescaled_gap, a0, radius=1.0,
                                   cells=cfg.sub_cells, rtol=cfg.solver_rtol)
        inc = taylor_fit(h_field, (0.0, 0.0), fit_radius, order, a0=a0)
        new_approx = _advance(approx, inc, scale)
        if order == 2:
            drift_tr = abs(new_approx.frozen_trace(a0))
            if drift_tr > 1e-9:
                raise FitError(
                    f"frozen-coefficient trace drifted to {drift_tr} at scale {k}"
                )

        fdev = _ball_max(
            lambda p: nl.eval(p, u_fn(p)) - nl.eval(p, 0.0), meas_r
        )
        u_sup = _ball_max(lambda p: u_fn(p) - u_shift, meas_r)
        phi_u = _extended_modulus(nl.modulus, u_sup)
        phi_scale = _extended_modulus(nl.modulus, scale)
        row["diag"].update({
            "gap": gap, "fdev": fdev, "phi_u": phi_u, "phi_scale": phi_scale,
            "phi_doubling_applicable": bool(u_sup >= scale),
            "increment": inc,
        })

        if order == 1:
            drift_k = lambda1 * lam ** (k * drift_exp)
            row["xi"] = (cfg.C1 / lam) * (lam ** 2 + (nu + drift_k) ** cfg.alpha)
            row["eta"] = (cfg.C2 / lam) * (
                scale * fdev
                + T * scale * (nu + drift_k)
                + drift_k * float(np.linalg.norm(approx.B))
            )
        else:
            om1 = _extended_modulus(problem.omega_a, scale)
            om2 = _extended_modulus(problem.omega_b, scale)
            osc = om1 + tau * scale
            f_norm = float(np.linalg.norm(approx.F))
            g_norm = float(np.linalg.norm(approx.G))
            row["xi"] = (cfg.C1 / lam ** 2) * (lam ** 3 + osc ** cfg.alpha)
            row["eta"] = (cfg.C2 / lam ** 2) * (
                fdev
                + osc * (T + 2.0 * g_norm + (tau / ell) * f_norm)
                + om2 * f_norm
            ) + (tau / (2.0 * ell)) * float(
                np.linalg.norm(new_approx.F - approx.F))

        approx = new_approx

    limit = approx
    tau_term = tau / (2.0 * ell)
    for row in rows:
        ap = row["approx"]
        scale = row["scale"]
        if order == 1:
            row["N"] = (row["M"] + float(np.linalg.norm(ap.B - limit.B))
                        + abs(ap.A - limit.A) / scale)
        else:
            f_dist = float(np.linalg.norm(ap.F - limit.F))
            row["N"] = (row["M"] + float(np.linalg.norm(ap.G - limit.G))
                        + f_dist / scale + abs(ap.E - limit.E) / scale ** 2
                        + tau_term * f_dist)

    records = []
    for i, row in enumerate(rows):
        ok = margin = None
        if i + 1 < len(rows):
            bound = cfg.safety * (row["xi"] * row["M"] + row["eta"])
            nxt = rows[i + 1]["M"]
            if bound == 0.0 and nxt == 0.0:
                ok, margin = True, math.inf
            else:
                ok, margin = bool(nxt <= bound), bound - nxt
        records.append(ScaleRecord(
            k=row["k"], scale=row["scale"], M=row["M"], xi=row["xi"],
            eta=row["eta"], S=row["S"], N=row["N"], approx=row["approx"],
            recurrence_ok=ok, margin=margin, diagnostics=row["diag"],
        ))

    flags = {
        "smallness": smallness,
        "u_shift": u_shift,
        "data_mode": "numeric" if numeric else "manufactured",
        "scale_floor_k": len(records) if truncated else None,
    }
    return IterationTrace(
        mode=mode, records=tuple(records), limit=limit, config=cfg,
        truncated=truncated, flags=flags,
        label=label or getattr(problem, "label", ""),
    )


def c1_probe(problem, cfg: IterationConfig, u=None, label="") -> IterationTrace:
    """First-order ladder: affine approximants, sup normalized by scale."""
    return _run_ladder(problem, cfg, 1, u, label)


def c11_probe(problem, cfg: IterationConfig, u=None, label="") -> IterationTrace:
    """Second-order ladder: trace-free quadratic approximants.

    The tracked sup carries the drift correction term
    (b(0).F_k) x1^2 / (2 a11(0)) and is normalized by scale squared.
    """
    return _run_ladder(problem, cfg, 2, u, label)


# ---------------------------------------------------------------------------
# verification and certificates


def verify_recurrence(trace: IterationTrace, safety=None) -> RecurrenceReport:
    """Check M_{k+1} <= safety * (xi_k M_k + eta_k) on consecutive records."""
    if len(trace.records) < 2:
        raise ValueError("need at least two scales to check the recurrence")
    safety = trace.config.safety if safety is None else float(safety)
    ok = []
    margins = []
    for cur, nxt in zip(trace.records, trace.records[1:]):
        bound = safety * (cur.xi * cur.M + cur.eta)
        if bound == 0.0 and nxt.M == 0.0:
            ok.append(True)
            margins.append(math.inf)
        else:
            ok.append(bool(nxt.M <= bound))
            margins.append(bound - nxt.M)
    return RecurrenceReport(tuple(ok), tuple(margins), safety)


def _stalled(M: np.ndarray) -> bool:
    if len(M) < 5 or M[-1] <= _TINY_SUP:
        return False
    tail = M[-5:]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = tail[1:] / tail[:-1]
    return bool(np.all(ratios > _STALL_RATIO))


def certificate(trace: IterationTrace) -> CertificateReport:
    """Verdict from the certificate sequence N_k.

    Certified means the tail of N_k is monotone and ends below the
    configured tolerance while the partial sums of M_k have plateaued;
    a non-decaying M tail is failed; anything else, including truncated
    traces, is inconclusive.
    """
    cfg = trace.config
    N = trace.N_values
    M = trace.M_values
    S = trace.S_values
    final_n = float(N[-1])

    tail_len = min(3, len(N) - 1)
    if tail_len > 0:
        tail = N[-(tail_len + 1):]
        slack = 1e-9 * np.maximum(tail[:-1], 1e-300)
        tail_monotone = bool(np.all(np.diff(tail) <= slack))
    else:
        tail_monotone = True

    plateau_span = min(3, len(S) - 1)
    if plateau_span > 0:
        sum_plateau = bool(
            S[-1] - S[-(plateau_span + 1)] <= max(0.05 * S[-1], 1e-9)
        )
    else:
        sum_plateau = True
    stalled = _stalled(M)

    if trace.truncated:
        verdict = "inconclusive"
    elif stalled:
        verdict = "failed"
    elif final_n <= cfg.cert_tol and tail_monotone and sum_plateau:
        verdict = "C1_certified" if trace.mode == "c1" else "C11_certified"
    else:
        verdict = "inconclusive"
    return CertificateReport(
        verdict=verdict, n_values=tuple(float(x) for x in N),
        final_n=final_n, tail_monotone=tail_monotone,
        sum_plateau=sum_plateau, stalled=stalled,
    )


# ---------------------------------------------------------------------------
# perturbation sweep and constant calibration


def _sweep_shapes():
    def s1(pts):
        th = np.arctan2(pts[:, 1], pts[:, 0])
        return np.cos(th) + 0.5 * np.sin(2.0 * th)

    def s2(pts):
        th = np.arctan2(pts[:, 1], pts[:, 0])
        return np.sin(th) - 0.3 * np.cos(3.0 * th)

    def s3(pts):
        th = np.arctan2(pts[:, 1], pts[:, 0])
        return np.cos(2.0 * th) + 0.4 * np.sin(th)

    return (("wave1", s1), ("wave2", s2), ("wave3", s3))


def _perturbed_field(eps: float) -> CoefficientField:
    def a_fn(pts, eps=eps):
        out = np.zeros((len(pts), 2, 2))
        out[:, 0, 0] = 1.0 + eps * np.sin(pts[:, 0])
        out[:, 1, 1] = 1.0
        return out

    return CoefficientField(
        a=a_fn, b=lambda pts: np.zeros((len(pts), 2)),
        ellipticity=1.0 - eps, drift_bound=0.0, q=4.0,
        label=f"perturbed:{eps}",
    )


def _solve_perturbed(eps, shape_fn, cells, rtol):
    grid = DiskGrid((0.0, 0.0), 1.0, 1.0 / cells)
    op = assemble(_perturbed_field(eps), grid)
    rhs = grid.zeros("rhs")
    bc = grid.boundary_from_function(shape_fn)
    return solve_dirichlet(op, rhs, bc, rtol=rtol)


def perturbation_sweep(epsilons=(0.02, 0.05, 0.1, 0.2), cells=48,
                       sub_cells=32, rtol=1e-11) -> SweepResult:
    """Frozen-coefficient gap against coefficient perturbation size.

    For each boundary shape and each eps, solves with the perturbed matrix
    field, compares against the frozen solve sharing its trace, and
    reports gap / sup|w|.  The log-log slope across eps is the headline
    number; it must come out positive for the approximation law to hold.
    """
    epsilons = tuple(float(e) for e in epsilons)
    if len(epsilons) < 2:
        raise ValueError("need at least two perturbation sizes")
    shapes = _sweep_shapes()
    ratios = np.zeros((len(shapes), len(epsilons)))
    for i, (_, shape_fn) in enumerate(shapes):
        for j, eps in enumerate(epsilons):
            w = _solve_perturbed(eps, shape_fn, cells, rtol)
            _, gap = approximate(w, np.eye(2), radius=1.0, cells=sub_cells,
                                 rtol=rtol)
            ratios[i, j] = gap / w.sup_norm()
    mean_ratio = ratios.mean(axis=0)
    slope = float(np.polyfit(np.log(epsilons), np.log(mean_ratio), 1)[0])
    return SweepResult(
        epsilons=epsilons, shapes=tuple(name for name, _ in shapes),
        ratios=ratios, slope=slope,
    )


def _boundary_exponent(cells=96, rtol=1e-11):
    """Measured boundary growth exponent of the Dirichlet solver.

    Solves with boundary data vanishing like |angle|^p at a rim point and
    fits sup |u| over shrinking half-balls at that point; the fitted slope
    is the exponent the solver actually delivers for rough data.
    """
    grid = DiskGrid((0.0, 0.0), 1.0, 1.0 / cells)
    op = assemble(make_field("identity", "zero"), grid)
    rhs = grid.zeros("rhs")
    anchor = np.array([1.0, 0.0])
    deltas = np.array([0.08, 0.15, 0.3, 0.5])
    slopes = []
    for p in (0.5, 0.65, 0.8):
        def data(pts, p=p):
            th = np.arctan2(pts[:, 1], pts[:, 0])
            return np.abs(th) ** p

        u = solve_dirichlet(op, rhs, grid.boundary_from_function(data),
                            rtol=rtol)
        d = np.hypot(u.points[:, 0] - anchor[0], u.points[:, 1] - anchor[1])
        sups = np.array([
            np.max(np.abs(u.values[d <= delta])) for delta in deltas
        ])
        slopes.append(np.polyfit(np.log(deltas), np.log(sups), 1)[0])
    return float(np.clip(min(slopes), 0.05, 0.95))


def _harmonic_suite():
    def rad(m):
        def fn(pts, m=m):
            z = pts[:, 0] + 1j * pts[:, 1]
            return np.real(z ** m)
        return fn

    def pole(pts):
        z = pts[:, 0] + 1j * pts[:, 1]
        return np.real(1.0 / (1.3 - z))

    def tilted(pts):
        z = pts[:, 0] + 1j * pts[:, 1]
        return np.imag((z - 0.2) ** 3) + 0.5 * np.real(z)

    return [rad(1), rad(2), rad(3), rad(5), pole, tilted]


def _fd_derivatives(fn, pts, h=1e-5):
    e1 = np.array([h, 0.0])
    e2 = np.array([0.0, h])
    f0 = fn(pts)
    fx = (fn(pts + e1) - fn(pts - e1)) / (2.0 * h)
    fy = (fn(pts + e2) - fn(pts - e2)) / (2.0 * h)
    fxx = (fn(pts + e1) - 2.0 * f0 + fn(pts - e1)) / h ** 2
    fyy = (fn(pts + e2) - 2.0 * f0 + fn(pts - e2)) / h ** 2
    fxy = (fn(pts + e1 + e2) - fn(pts + e1 - e2)
           - fn(pts - e1 + e2) + fn(pts - e1 - e2)) / (4.0 * h ** 2)
    grad = np.hypot(fx, fy)
    hess = np.maximum(np.abs(fxx), np.maximum(np.abs(fyy), np.abs(fxy)))
    return f0, grad, hess


def _interior_bound_constant():
    rr = np.linspace(0.0, 0.25, 26)
    th = np.linspace(0.0, 2.0 * np.pi, 72, endpoint=False)
    R, TH = np.meshgrid(rr, th, indexing="ij")
    pts = np.stack([(R * np.cos(TH)).ravel(), (R * np.sin(TH)).ravel()], axis=1)
    rim = np.linspace(0.0, 2.0 * np.pi, 720, endpoint=False)
    circle = np.stack([np.cos(rim), np.sin(rim)], axis=1)
    worst = 0.0
    for fn in _harmonic_suite():
        sup_norm = float(np.max(np.abs(fn(circle))))
        f0, grad, hess = _fd_derivatives(fn, pts)
        combined = float(np.max(np.abs(f0) + grad + hess)) / sup_norm
        worst = max(worst, combined)
    return worst


def _one_step_linear(u_field, v_fn, lam, sub_cells, rtol, fit_radius):
    """One rung of the first-order ladder on a numeric solution."""
    sampler = bicubic_sampler(u_field)
    shift = float(sampler(np.zeros((1, 2)))[0])

    def w_fn(pts):
        return sampler(pts) - shift - v_fn(pts)

    M0, _ = ball_sup(w_fn, 0.9, cells=48)
    h, gap = approximate(w_fn, np.eye(2), radius=1.0, cells=sub_cells,
                         rtol=rtol)
    inc = taylor_fit(h, (0.0, 0.0), fit_radius, 1)
    M1, _ = ball_sup(lambda p: w_fn(p) - inc(p), lam, cells=48)
    return M0, M1 / lam, gap, inc


def calibrate_constants(lam=0.2, cells=48, sub_cells=32, rtol=1e-11) -> dict:
    """Empirical constants for the ladder inequalities.

    beta is the measured boundary growth exponent, alpha = beta/(2+beta);
    C0 bounds interior value, gradient and second differences of frozen
    solutions at radius 1/4; C1 and C2 come from least squares on one-step
    ladder experiments (coefficient perturbations for C1, drift strengths
    for C2).  A holdout boundary shape checks that the perturbation law
    decays at least as fast as alpha predicts.
    """
    beta = _boundary_exponent(cells=max(cells, 96), rtol=rtol)
    alpha = beta / (2.0 + beta)
    if not (0.0 < alpha <= 1.0 / 3.0 + 1e-12):
        raise CalibrationError(f"alpha {alpha} escaped (0, 1/3]")
    C0 = _interior_bound_constant()

    epsilons = (0.02, 0.05, 0.1, 0.2)
    shapes = _sweep_shapes()
    train, holdout = shapes[:2], shapes[2:]
    num = 0.0
    den = 0.0
    for _, shape_fn in train:
        for eps in epsilons:
            w = _solve_perturbed(eps, shape_fn, cells, rtol)
            M0, M1, _, _ = _one_step_linear(
                w, lambda pts: np.zeros(len(pts)), lam, sub_cells, rtol, lam)
            x = (lam ** 2 + eps ** alpha) * M0 / lam
            num += x * M1
            den += x * x
    if den <= 0.0:
        raise CalibrationError("degenerate C1 regression: no usable experiments")
    C1 = num / den
    if not (0.0 < C1 and 2.0 * C1 * lam < 0.25):
        raise CalibrationError(f"calibrated C1={C1} breaks 2*C1*lam < 1/4")

    hold_ratios = []
    for _, shape_fn in holdout:
        row = []
        for eps in epsilons:
            w = _solve_perturbed(eps, shape_fn, cells, rtol)
            _, gap = approximate(w, np.eye(2), radius=1.0, cells=sub_cells,
                                 rtol=rtol)
            row.append(gap / w.sup_norm())
        hold_ratios.append(row)
    holdout_slope = float(np.polyfit(
        np.log(epsilons), np.log(np.mean(hold_ratios, axis=0)), 1)[0])
    if holdout_slope < alpha - 0.05:
        raise CalibrationError(
            f"holdout slope {holdout_slope} under alpha - 0.05 = {alpha - 0.05}"
        )

    grid = DiskGrid((0.0, 0.0), 1.0, 1.0 / cells)
    num = 0.0
    den = 0.0
    for bmag in (0.3, 0.6, 1.0):
        field = CoefficientField(
            a=lambda pts: np.broadcast_to(np.eye(2), (len(pts), 2, 2)),
            b=lambda pts, bmag=bmag: np.column_stack(
                [np.full(len(pts), bmag), np.zeros(len(pts))]),
            ellipticity=1.0, drift_bound=bmag * math.pi ** 0.25, q=4.0,
            label=f"drift:{bmag}",
        )
        op = assemble(field, grid)
        rhs = grid.field_from_function(lambda pts: np.full(len(pts), 4.0))
        for _, shape_fn in shapes:
            u = solve_dirichlet(op, rhs, grid.boundary_from_function(shape_fn),
                                rtol=rtol)
            M0, M1, _, _ = _one_step_linear(
                u, lambda pts: pts[:, 0] ** 2 + pts[:, 1] ** 2, lam,
                sub_cells, rtol, lam)
            lam1 = field.drift_bound
            xi0 = (C1 / lam) * (lam ** 2 + lam1 ** alpha)
            eta_need = max(0.0, M1 - xi0 * M0)
            bracket = 2.0 * lam1 / lam
            num += eta_need * bracket
            den += bracket * bracket
    if den <= 0.0:
        raise CalibrationError("degenerate C2 regression: no usable experiments")
    C2 = max(num / den, 0.01)

    return {"C0": C0, "C1": float(C1), "C2": float(C2),
            "alpha": float(alpha), "beta": float(beta),
            "holdout_slope": holdout_slope}


# ---------------------------------------------------------------------------
# serialization


_CSV_COLUMNS = {
    "c1": ["k", "scale", "M_k", "xi_k", "eta_k", "S_k", "N_k", "A", "B1", "B2"],
    "c11": ["k", "scale", "M_k", "xi_k", "eta_k", "S_k", "N_k",
            "E", "F1", "F2", "G11", "G12", "G22"],
}


def trace_to_csv(trace: IterationTrace, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS[trace.mode])
        for rec in trace.records:
            ap = rec.approx
            if trace.mode == "c1":
                coeffs = [ap.A, ap.B[0], ap.B[1]]
            else:
                coeffs = [ap.E, ap.F[0], ap.F[1],
                          ap.G[0, 0], ap.G[0, 1], ap.G[1, 1]]
            writer.writerow(
                [rec.k]
                + [repr(float(x)) for x in
                   [rec.scale, rec.M, rec.xi, rec.eta, rec.S, rec.N]]
                + [repr(float(x)) for x in coeffs]
            )
