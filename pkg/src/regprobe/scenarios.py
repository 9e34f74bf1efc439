"""Scenario documents and their executors.

A scenario is a single JSON document, schema version 1, all keys
lower_snake.  It names a mode (``c1``, ``c11``, ``lemma25_sweep``,
``solver_validation``, ``modulus_check``) plus the config blocks that mode
needs.  Bundled scenarios ship inside the package and are resolved by id.

Execution is deterministic: the seed is part of the document and is echoed
in the report.  Every artifact (trace CSV, report JSON) is written through
a temp file in the target directory and renamed into place, so a crashed
or rejected run leaves nothing half-written.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

from .campanato import (
    IterationConfig,
    c1_probe,
    c11_probe,
    certificate,
    perturbation_sweep,
    trace_to_csv,
    verify_recurrence,
)
from .elliptic import abp_check, assemble, convergence_order, solve_dirichlet
from .errors import RegistryError, ScenarioError, SchemaVersionError
from .fields import CoefficientField
from .grid import DiskGrid
from .manufactured import get_problem
from .modulus import dini_integral, dini_tail_sum, doubling_check, parse_modulus
from .semilinear import PicardConfig, picard_solve

SCHEMA_VERSION = 1

MODES = ("c1", "c11", "lemma25_sweep", "solver_validation", "modulus_check")

_COMMON_KEYS = {"v", "id", "mode", "seed", "output_dir", "description"}
_MODE_KEYS = {
    "c1": {"problem", "iteration", "data_mode", "grid", "picard"},
    "c11": {"problem", "iteration", "data_mode", "grid", "picard"},
    "lemma25_sweep": {"epsilons", "cells", "sub_cells", "solver_rtol",
                      "min_slope"},
    "solver_validation": {"resolutions", "operators", "solver_rtol"},
    "modulus_check": {"families", "lams", "k0_max"},
}

_DEFAULT_SEED = 20260822


def _scenario_dir():
    return resources.files("regprobe") / "scenarios"


def bundled_names() -> tuple:
    names = [p.name[:-5] for p in _scenario_dir().iterdir()
             if p.name.endswith(".json")]
    return tuple(sorted(names))


def load_scenario(ref) -> dict:
    """Load and validate a scenario from a file path or a bundled id."""
    path = Path(str(ref))
    if path.exists() and path.is_file():
        text = path.read_text()
        source = str(path)
    else:
        candidate = _scenario_dir() / f"{ref}.json"
        if "/" in str(ref) or not candidate.is_file():
            raise RegistryError(
                f"no scenario file or bundled scenario id {ref!r} "
                f"(bundled: {', '.join(bundled_names())})")
        text = candidate.read_text()
        source = f"bundled:{ref}"
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(
            f"{source}: invalid JSON at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}") from exc
    validate_scenario(doc, source=source)
    return doc


def validate_scenario(doc, source: str = "scenario") -> None:
    """Check schema version, key set, config invariants, and registry ids."""
    if not isinstance(doc, dict):
        raise ScenarioError(f"{source}: document must be a JSON object")
    if "v" not in doc:
        raise SchemaVersionError(f"{source}: missing schema version key 'v'")
    if doc["v"] != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{source}: schema version {doc['v']!r} not supported "
            f"(expected {SCHEMA_VERSION})")
    ident = doc.get("id")
    if not isinstance(ident, str) or not ident:
        raise ScenarioError(f"{source}: key 'id' must be a non-empty string")
    mode = doc.get("mode")
    if mode not in MODES:
        raise ScenarioError(
            f"{source}: key 'mode' must be one of {', '.join(MODES)}, "
            f"got {mode!r}")
    allowed = _COMMON_KEYS | _MODE_KEYS[mode]
    for key in doc:
        if key not in allowed:
            raise ScenarioError(
                f"{source}: unknown key {key!r} for mode {mode!r}")
    seed = doc.get("seed", _DEFAULT_SEED)
    if not isinstance(seed, int):
        raise ScenarioError(f"{source}: key 'seed' must be an integer")

    if mode in ("c1", "c11"):
        if "problem" not in doc:
            raise ScenarioError(f"{source}: mode {mode!r} needs key 'problem'")
        get_problem(doc["problem"])
        iteration = doc.get("iteration", {})
        if not isinstance(iteration, dict):
            raise ScenarioError(f"{source}: key 'iteration' must be an object")
        try:
            IterationConfig(**iteration)
        except TypeError as exc:
            raise ScenarioError(f"{source}: bad iteration block: {exc}") from exc
        except ValueError as exc:
            raise ScenarioError(f"{source}: bad iteration block: {exc}") from exc
        data_mode = doc.get("data_mode", "manufactured")
        if data_mode not in ("manufactured", "numeric"):
            raise ScenarioError(
                f"{source}: key 'data_mode' must be 'manufactured' or "
                f"'numeric', got {data_mode!r}")
        if data_mode == "numeric":
            cells = doc.get("grid", {}).get("cells")
            if not isinstance(cells, int) or cells < 16:
                raise ScenarioError(
                    f"{source}: numeric mode needs grid.cells >= 16")
            picard = doc.get("picard", {})
            try:
                PicardConfig(**picard)
            except (TypeError, ValueError) as exc:
                raise ScenarioError(
                    f"{source}: bad picard block: {exc}") from exc
    elif mode == "lemma25_sweep":
        eps = doc.get("epsilons", [0.02, 0.05, 0.1, 0.2])
        if (not isinstance(eps, list) or len(eps) < 2
                or not all(isinstance(e, (int, float)) and 0 < e < 1
                           for e in eps)):
            raise ScenarioError(
                f"{source}: key 'epsilons' must list at least two values "
                f"in (0, 1)")
    elif mode == "solver_validation":
        ops = doc.get("operators", 20)
        if not isinstance(ops, int) or ops < 1:
            raise ScenarioError(
                f"{source}: key 'operators' must be a positive integer")
        hs = doc.get("resolutions", [1 / 32, 1 / 64, 1 / 128])
        if not isinstance(hs, list) or len(hs) < 3:
            raise ScenarioError(
                f"{source}: key 'resolutions' must list at least three "
                f"spacings")
    elif mode == "modulus_check":
        fams = doc.get("families", _DEFAULT_FAMILIES)
        if not isinstance(fams, list) or not fams:
            raise ScenarioError(f"{source}: key 'families' must be a "
                                f"non-empty list")
        for fam in fams:
            if (not isinstance(fam, dict) or "id" not in fam
                    or "dini" not in fam):
                raise ScenarioError(
                    f"{source}: each family needs keys 'id' and 'dini'")
            parse_modulus(fam["id"])


def sanitize(obj):
    """Make a value JSON-safe: arrays to lists, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return sanitize(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".",
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_report(report: dict, path) -> None:
    atomic_write_text(path, json.dumps(sanitize(report), indent=2,
                                       allow_nan=False) + "\n")


def _write_rows(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def run_scenario(doc: dict, out_dir) -> dict:
    """Execute a validated scenario; write its artifacts; return the report."""
    out_dir = Path(doc.get("output_dir", out_dir))
    mode = doc["mode"]
    if mode in ("c1", "c11"):
        report = _run_probe(doc, out_dir)
    elif mode == "lemma25_sweep":
        report = _run_sweep(doc, out_dir)
    elif mode == "solver_validation":
        report = _run_solver_validation(doc, out_dir)
    else:
        report = _run_modulus_check(doc, out_dir)
    _write_report(report, out_dir / f"{doc['id']}_report.json")
    return report


def _base_report(doc: dict, verdict: str, limits: dict, flags: dict) -> dict:
    config = {k: v for k, v in doc.items() if k not in ("output_dir",)}
    flags = dict(flags)
    flags["seed"] = doc.get("seed", _DEFAULT_SEED)
    return {
        "v": SCHEMA_VERSION,
        "scenario_id": doc["id"],
        "mode": doc["mode"],
        "verdict": verdict,
        "config": config,
        "limits": limits,
        "flags": flags,
    }


def _run_probe(doc: dict, out_dir: Path) -> dict:
    problem = get_problem(doc["problem"])
    cfg = IterationConfig(**doc.get("iteration", {}))
    u = None
    if doc.get("data_mode", "manufactured") == "numeric":
        cells = doc["grid"]["cells"]
        grid = DiskGrid((0.0, 0.0), 1.0, 1.0 / cells)
        op = assemble(problem.field, grid, label=doc["id"])
        boundary = grid.boundary_from_function(problem.boundary)
        picard = PicardConfig(**doc.get("picard", {}))
        u = picard_solve(op, problem.nonlinearity, boundary, picard).u

    probe = c1_probe if doc["mode"] == "c1" else c11_probe
    trace = probe(problem, cfg, u=u, label=doc["id"])
    cert = certificate(trace)
    rec = verify_recurrence(trace) if len(trace.records) >= 2 else None

    tmp_csv = out_dir / f"{doc['id']}_trace.csv"
    tmp_csv.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=tmp_csv.parent, prefix=tmp_csv.name + ".",
                               suffix=".tmp")
    os.close(fd)
    try:
        trace_to_csv(trace, tmp)
        os.replace(tmp, tmp_csv)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

    last = trace.records[-1]
    limits = {
        "final_n": cert.final_n,
        "s_last": last.S,
        "m_first": trace.records[0].M,
        "m_last": last.M,
        "worst_margin": min(rec.margins) if rec else None,
        "ok_fraction": rec.ok_fraction if rec else None,
        "limit": asdict(trace.limit),
    }
    flags = dict(trace.flags)
    flags["scales_run"] = len(trace.records)
    return _base_report(doc, cert.verdict, limits, flags)


def _run_sweep(doc: dict, out_dir: Path) -> dict:
    eps = tuple(doc.get("epsilons", [0.02, 0.05, 0.1, 0.2]))
    sweep = perturbation_sweep(
        epsilons=eps,
        cells=doc.get("cells", 48),
        sub_cells=doc.get("sub_cells", 32),
        rtol=doc.get("solver_rtol", 1e-11),
    )
    min_slope = doc.get("min_slope", 0.15)
    rows = []
    for i, shape in enumerate(sweep.shapes):
        for j, e in enumerate(sweep.epsilons):
            rows.append([repr(float(e)), shape, repr(float(sweep.ratios[i, j]))])
    _write_rows(out_dir / f"{doc['id']}_trace.csv",
                ["epsilon", "shape", "ratio"], rows)
    verdict = "pass" if sweep.slope >= min_slope else "failed"
    limits = {
        "slope": sweep.slope,
        "alpha_estimate": sweep.slope,
        "min_slope": min_slope,
        "epsilons": list(sweep.epsilons),
        "mean_ratios": np.mean(sweep.ratios, axis=0),
    }
    return _base_report(doc, verdict, limits, {"shapes": list(sweep.shapes)})


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _random_operator(rng) -> tuple:
    theta = rng.uniform(0.0, math.pi)
    mu = rng.uniform(0.5, 1.5, size=2)
    rot = _rotation(theta)
    a0 = rot.T @ np.diag(mu) @ rot
    wave = rng.uniform(-2.0, 2.0, size=2)
    phase = rng.uniform(0.0, 2.0 * math.pi)

    def a_fn(pts, a0=a0, wave=wave, phase=phase):
        bump = 1.0 + 0.15 * np.sin(pts @ wave + phase)
        return bump[:, None, None] * a0

    b0 = rng.uniform(-0.7, 0.7, size=2)
    field = CoefficientField(
        a=a_fn,
        b=lambda pts, b0=b0: np.broadcast_to(b0, (len(pts), 2)),
        ellipticity=0.42,
        drift_bound=float(np.linalg.norm(b0)) * math.pi ** 0.25,
        q=4.0,
        label="randomized",
    )

    coeff = rng.normal(0.0, 0.5, size=7)

    def boundary_fn(pts, coeff=coeff):
        th = np.arctan2(pts[:, 1], pts[:, 0])
        out = np.full(len(pts), coeff[0])
        for m in (1, 2, 3):
            out = out + (coeff[2 * m - 1] * np.cos(m * th)
                         + coeff[2 * m] * np.sin(m * th)) / (1.0 + m)
        return out

    fwave = rng.uniform(-2.0, 2.0, size=2)
    fphase = rng.uniform(0.0, 2.0 * math.pi)

    def forcing_fn(pts, fwave=fwave, fphase=fphase):
        return -(1.5 + np.sin(pts @ fwave + fphase))

    return field, boundary_fn, forcing_fn


_SMOOTH_CASES = (
    ("drift_exponential",
     dict(a=lambda pts: np.broadcast_to(np.eye(2), (len(pts), 2, 2)),
          b=lambda pts: np.broadcast_to(np.array([1.0, 0.0]), (len(pts), 2)),
          ellipticity=1.0, drift_bound=math.pi ** 0.25, q=4.0),
     lambda pts: np.exp(pts[:, 0]) * np.sin(pts[:, 1]),
     lambda pts: np.exp(pts[:, 0]) * np.sin(pts[:, 1])),
    ("variable_diagonal",
     dict(a=lambda pts: np.stack(
              [np.stack([1.0 + 0.3 * np.sin(pts[:, 0]),
                         np.zeros(len(pts))], axis=1),
               np.stack([np.zeros(len(pts)), np.ones(len(pts))], axis=1)],
              axis=1),
          b=lambda pts: np.zeros((len(pts), 2)),
          ellipticity=0.7, drift_bound=0.0, q=4.0),
     lambda pts: np.cos(pts[:, 0]) + pts[:, 1] ** 4 / 12.0,
     lambda pts: -(1.0 + 0.3 * np.sin(pts[:, 0])) * np.cos(pts[:, 0])
         + pts[:, 1] ** 2),
    ("mixed_derivative",
     dict(a=lambda pts: np.broadcast_to(
              np.array([[1.0, 0.2], [0.2, 1.0]]), (len(pts), 2, 2)),
          b=lambda pts: np.zeros((len(pts), 2)),
          ellipticity=0.8, drift_bound=0.0, q=4.0),
     lambda pts: np.sin(pts[:, 0] + pts[:, 1]),
     lambda pts: -2.4 * np.sin(pts[:, 0] + pts[:, 1])),
)

_EXACT_A0 = np.array([[1.2, 0.3], [0.3, 0.9]])


def _exact_quadratic(pts):
    x, y = pts[:, 0], pts[:, 1]
    return (0.9 * x ** 2 + 0.8 * x * y - (22.0 / 15.0) * y ** 2
            + 0.5 * x - 0.3 * y + 0.25)


def _run_solver_validation(doc: dict, out_dir: Path) -> dict:
    rng = np.random.default_rng(doc.get("seed", _DEFAULT_SEED))
    hs = [float(h) for h in doc.get("resolutions", [1 / 32, 1 / 64, 1 / 128])]
    n_ops = doc.get("operators", 20)
    rtol = doc.get("solver_rtol", 1e-11)
    rows = []
    ok_all = True

    orders = {}
    for name, field_kw, u_exact, rhs_fn in _SMOOTH_CASES:
        field = CoefficientField(label=name, **field_kw)
        rep = convergence_order(field, u_exact, rhs_fn, hs, rtol=rtol)
        orders[name] = rep.order
        ok = rep.order is not None and abs(rep.order - 2.0) <= 0.2
        ok_all = ok_all and ok
        rows.append([name, "order", repr(min(hs)), repr(float(rep.order)),
                     int(ok)])

    exact_errs = []
    field0 = CoefficientField(
        a=lambda pts: np.broadcast_to(_EXACT_A0, (len(pts), 2, 2)),
        b=lambda pts: np.zeros((len(pts), 2)),
        ellipticity=0.6, drift_bound=0.0, q=4.0, label="frozen_quadratic")
    for h in hs[:2]:
        grid = DiskGrid((0.0, 0.0), 1.0, h)
        op = assemble(field0, grid)
        rhs = grid.field_from_function(lambda pts: np.zeros(len(pts)), "rhs")
        bc = grid.boundary_from_function(_exact_quadratic)
        u = solve_dirichlet(op, rhs, bc, rtol=rtol)
        err = float(np.max(np.abs(u.values - _exact_quadratic(grid.coords))))
        exact_errs.append(err)
        ok = err <= 1e-10
        ok_all = ok_all and ok
        rows.append(["frozen_quadratic", "exact", repr(h), repr(err), int(ok)])

    mp_excess = []
    spreads = []
    h_coarse, h_fine = hs[0], hs[1]
    for i in range(n_ops):
        field, boundary_fn, forcing_fn = _random_operator(rng)
        grid = DiskGrid((0.0, 0.0), 1.0, h_coarse)
        op = assemble(field, grid)
        bc = grid.boundary_from_function(boundary_fn)
        zero = grid.field_from_function(lambda pts: np.zeros(len(pts)), "rhs")
        u0 = solve_dirichlet(op, zero, bc, rtol=rtol)
        excess = float(np.max(u0.values) - np.max(bc.values))
        mp_excess.append(excess)
        ok = excess <= 1e-10
        ok_all = ok_all and ok
        rows.append([f"op{i:02d}", "max_principle", repr(h_coarse),
                     repr(excess), int(ok)])

        implied = []
        for h in (h_coarse, h_fine):
            g = DiskGrid((0.0, 0.0), 1.0, h)
            o = assemble(field, g)
            f = g.field_from_function(forcing_fn, "rhs")
            b = g.boundary_from_function(lambda pts: np.zeros(len(pts)))
            uf = solve_dirichlet(o, f, b, rtol=rtol)
            rep = abp_check(uf, f, b)
            implied.append(rep.implied_C)
            rows.append([f"op{i:02d}", "implied_c", repr(h),
                         repr(float(rep.implied_C)), int(rep.passed)])
            ok_all = ok_all and rep.passed
        spread = abs(implied[0] - implied[1]) / max(abs(implied[0]),
                                                    abs(implied[1]), 1e-300)
        spreads.append(spread)
        ok = spread <= 0.2
        ok_all = ok_all and ok
        rows.append([f"op{i:02d}", "implied_c_spread", repr(h_fine),
                     repr(spread), int(ok)])

    _write_rows(out_dir / f"{doc['id']}_trace.csv",
                ["case", "kind", "h", "value", "ok"], rows)
    limits = {
        "orders": orders,
        "exact_sup_error": max(exact_errs),
        "mp_max_excess": max(mp_excess),
        "implied_c_max_spread": max(spreads) if spreads else 0.0,
        "operators": n_ops,
    }
    return _base_report(doc, "pass" if ok_all else "failed", limits, {})


_DEFAULT_FAMILIES = [
    {"id": "power:0.5", "dini": True},
    {"id": "power:1.0", "dini": True},
    {"id": "log_power:2.0", "dini": True},
    {"id": "log_power:1.0", "dini": False},
    {"id": "log_inverse", "dini": False},
    {"id": "zero", "dini": True},
]


def _run_modulus_check(doc: dict, out_dir: Path) -> dict:
    families = doc.get("families", _DEFAULT_FAMILIES)
    lams = [float(v) for v in doc.get("lams", [0.125, 0.2, 0.25])]
    k0_max = int(doc.get("k0_max", 6))
    rows = []
    ok_all = True
    checked = 0
    skipped = 0
    worst_ratio = 0.0

    for fam in families:
        omega = parse_modulus(fam["id"])
        r_hi = omega.r_max if math.isfinite(omega.r_max) else 1.0
        scan = np.geomspace(r_hi * 1e-12, r_hi, 64)
        vals = omega.eval(scan)
        monotone = bool(np.all(np.diff(vals) >= -1e-12 * max(vals[-1], 1e-300)))
        at_zero = omega.eval_log(-1e300) <= 1e-200
        doubling = doubling_check(omega)
        classified = dini_integral(omega).classification
        class_ok = classified == ("dini" if fam["dini"] else "non_dini")
        base_ok = monotone and at_zero and doubling and class_ok
        ok_all = ok_all and base_ok
        rows.append([fam["id"], "invariants", "", "", "", int(base_ok)])

        for lam in lams:
            for k0 in range(1, k0_max + 1):
                if lam ** (k0 - 1) > omega.r_max * (1.0 + 1e-12):
                    skipped += 1
                    continue
                tail, bound = dini_tail_sum(omega, lam, k0)
                checked += 1
                if math.isinf(tail) and math.isinf(bound):
                    ok = not fam["dini"]
                else:
                    ok = tail <= bound * (1.0 + 1e-9)
                    if bound > 0.0:
                        worst_ratio = max(worst_ratio, tail / bound)
                ok_all = ok_all and ok
                rows.append([fam["id"], "tail_sum", repr(lam), k0,
                             repr(float(tail)), int(ok)])

    _write_rows(out_dir / f"{doc['id']}_trace.csv",
                ["family", "kind", "lam", "k0", "value", "ok"], rows)
    limits = {
        "families": len(families),
        "combos_checked": checked,
        "combos_skipped_out_of_domain": skipped,
        "max_tail_to_bound": worst_ratio,
    }
    return _base_report(doc, "pass" if ok_all else "failed", limits, {})
