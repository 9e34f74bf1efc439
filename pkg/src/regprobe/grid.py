"""Disk grids and nodal fields.

The grid is a uniform Cartesian lattice ``center + (i*h, j*h)`` clipped to an
open disk.  Nodes strictly inside the disk are interior; stencil arms that
leave the disk are cut at the circle, and the cut geometry (arm fraction and
boundary intersection point) is precomputed per direction so the operator
assembly can apply unequal-arm differences.

Direction order is fixed as E, W, N, S, NE, SW, NW, SE; the first four are
the axis arms, the last four the diagonal arms grouped in opposite pairs.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import DomainError, FieldValidationError

DIRECTIONS = np.array(
    [[1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [-1, -1], [-1, 1], [1, -1]],
    dtype=int,
)
AXIS_PAIRS = ((0, 1), (2, 3))
DIAG_PAIRS = ((4, 5), (6, 7))

_ROLES = ("solution", "rhs", "boundary", "residual")


@dataclass(frozen=True)
class DiskGrid:
    """Uniform lattice on a disk with Shortley-Weller arm geometry."""

    center: tuple[float, float]
    radius: float
    h: float
    coords: np.ndarray = dc_field(repr=False, default=None)
    neighbor: np.ndarray = dc_field(repr=False, default=None)
    arm: np.ndarray = dc_field(repr=False, default=None)
    boundary_col: np.ndarray = dc_field(repr=False, default=None)
    boundary_points: np.ndarray = dc_field(repr=False, default=None)

    def __post_init__(self):
        if not (self.radius > 0.0 and self.h > 0.0):
            raise DomainError("radius and spacing must be positive")
        if self.h > self.radius / 16.0 * (1.0 + 1e-12):
            raise DomainError(
                f"spacing h={self.h} too coarse for radius {self.radius}; need h <= radius/16"
            )
        if self.coords is not None:
            return

        cx, cy = float(self.center[0]), float(self.center[1])
        r = float(self.radius)
        h = float(self.h)
        m = int(math.floor(r / h + 1e-12)) + 1
        ax = np.arange(-m, m + 1)
        gi, gj = np.meshgrid(ax, ax, indexing="ij")
        px = gi * h
        py = gj * h
        rho2 = px * px + py * py
        inner = rho2 < (r * (1.0 - 1e-13)) ** 2

        index = -np.ones(gi.shape, dtype=int)
        index[inner] = np.arange(int(inner.sum()))
        n_int = int(inner.sum())
        coords = np.stack([px[inner] + cx, py[inner] + cy], axis=1)

        neighbor = -np.ones((n_int, 8), dtype=int)
        arm = np.ones((n_int, 8))
        bcol = -np.ones((n_int, 8), dtype=int)
        bpoints: list[np.ndarray] = []

        ii = gi[inner]
        jj = gj[inner]
        lx = px[inner]
        ly = py[inner]
        next_col = 0
        for k, (di, dj) in enumerate(DIRECTIONS):
            ni = ii + di
            nj = jj + dj
            ok = (np.abs(ni) <= m) & (np.abs(nj) <= m)
            nidx = -np.ones(n_int, dtype=int)
            nidx[ok] = index[ni[ok] + m, nj[ok] + m]
            neighbor[:, k] = nidx
            cut = nidx < 0
            if not np.any(cut):
                continue
            vx = di * h
            vy = dj * h
            v2 = vx * vx + vy * vy
            pv = lx[cut] * vx + ly[cut] * vy
            disc = pv * pv + v2 * (r * r - (lx[cut] ** 2 + ly[cut] ** 2))
            theta = (-pv + np.sqrt(disc)) / v2
            theta = np.clip(theta, 1e-14, 1.0)
            arm[cut, k] = theta
            cols = np.arange(next_col, next_col + int(cut.sum()))
            bcol[cut, k] = cols
            next_col = cols[-1] + 1 if len(cols) else next_col
            bpoints.append(np.stack([lx[cut] + theta * vx + cx,
                                     ly[cut] + theta * vy + cy], axis=1))

        bp = np.concatenate(bpoints, axis=0) if bpoints else np.zeros((0, 2))
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "neighbor", neighbor)
        object.__setattr__(self, "arm", arm)
        object.__setattr__(self, "boundary_col", bcol)
        object.__setattr__(self, "boundary_points", bp)

    @property
    def n_interior(self) -> int:
        return len(self.coords)

    @property
    def n_boundary(self) -> int:
        return len(self.boundary_points)

    def interior_radii(self) -> np.ndarray:
        d = self.coords - np.asarray(self.center)
        return np.hypot(d[:, 0], d[:, 1])

    def node_weights(self) -> np.ndarray:
        """Midpoint-cell quadrature weights for the interior nodes.

        Each node owns the cell of side ``h`` centered on it; cells cut by
        the circle are weighted by the covered-area fraction from a 4x4
        subsample, matching the ball quadrature used for field norms.
        """
        d = self.coords - np.asarray(self.center)
        h = self.h
        r = self.radius
        xlo = d[:, 0] - 0.5 * h
        ylo = d[:, 1] - 0.5 * h
        xhi = xlo + h
        yhi = ylo + h
        far = np.hypot(np.maximum(np.abs(xlo), np.abs(xhi)),
                       np.maximum(np.abs(ylo), np.abs(yhi)))
        w = np.full(len(d), h * h)
        cut = far > r
        if np.any(cut):
            sub = (np.arange(4) + 0.5) / 4.0
            sx = xlo[cut, None, None] + h * sub[None, :, None]
            sy = ylo[cut, None, None] + h * sub[None, None, :]
            frac = np.mean(sx * sx + sy * sy <= r * r, axis=(1, 2))
            w[cut] = frac * h * h
        return w

    def field_from_function(self, fn, role: str = "rhs") -> "DiscreteField":
        vals = np.asarray(fn(self.coords), dtype=float)
        return DiscreteField(self, vals, role)

    def boundary_from_function(self, fn) -> "DiscreteField":
        vals = np.asarray(fn(self.boundary_points), dtype=float)
        return DiscreteField(self, vals, "boundary", points=self.boundary_points)

    def zeros(self, role: str = "rhs") -> "DiscreteField":
        return DiscreteField(self, np.zeros(self.n_interior), role)


@dataclass(frozen=True)
class DiscreteField:
    """Nodal values bound to a grid, tagged by role."""

    grid: DiskGrid
    values: np.ndarray
    role: str
    points: np.ndarray = None

    def __post_init__(self):
        if self.role not in _ROLES:
            raise FieldValidationError(f"unknown field role {self.role!r}")
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if self.points is None:
            expected = (self.grid.n_boundary if self.role == "boundary"
                        else self.grid.n_interior)
            pts = (self.grid.boundary_points if self.role == "boundary"
                   else self.grid.coords)
            if vals.shape != (expected,):
                raise FieldValidationError(
                    f"{self.role} field has {vals.shape} values, expected ({expected},)"
                )
            object.__setattr__(self, "points", pts)
        if not np.all(np.isfinite(vals)):
            raise FieldValidationError(f"{self.role} field contains non-finite values")

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if len(self.values) else 0.0

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "value"])
            for (x, y), v in zip(self.points, self.values):
                writer.writerow([repr(float(x)), repr(float(y)), repr(float(v))])


def bicubic_sampler(field: DiscreteField):
    """Return a callable evaluating the field between nodes.

    Local 4x4 Lagrange interpolation on the lattice, exact on cubics, so
    resampling costs O(h^4) accuracy.  Every evaluation point must have its
    full 4x4 node block inside the disk; points too close to the rim raise
    DomainError rather than extrapolate from undefined exterior values.
    """
    if field.role == "boundary":
        raise FieldValidationError("cannot interpolate a boundary-trace field")
    grid = field.grid
    m = int(math.floor(grid.radius / grid.h + 1e-12)) + 1
    lattice = np.full((2 * m + 1, 2 * m + 1), np.nan)
    cx, cy = float(grid.center[0]), float(grid.center[1])
    ij = np.round((field.points - [cx, cy]) / grid.h).astype(int)
    lattice[ij[:, 0] + m, ij[:, 1] + m] = field.values

    def sample(pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        s = (pts - [cx, cy]) / grid.h
        i0 = np.floor(s[:, 0]).astype(int)
        j0 = np.floor(s[:, 1]).astype(int)
        tx = s[:, 0] - i0
        ty = s[:, 1] - j0
        if np.any(i0 - 1 + m < 0) or np.any(i0 + 2 + m > 2 * m) \
                or np.any(j0 - 1 + m < 0) or np.any(j0 + 2 + m > 2 * m):
            raise DomainError("interpolation point outside the lattice")

        def weights(t):
            return np.stack([
                -t * (t - 1.0) * (t - 2.0) / 6.0,
                (t * t - 1.0) * (t - 2.0) / 2.0,
                -t * (t + 1.0) * (t - 2.0) / 2.0,
                t * (t * t - 1.0) / 6.0,
            ], axis=1)

        wx = weights(tx)
        wy = weights(ty)
        out = np.zeros(len(pts))
        for a in range(4):
            row = np.zeros(len(pts))
            for bq in range(4):
                row += wy[:, bq] * lattice[i0 - 1 + a + m, j0 - 1 + bq + m]
            out += wx[:, a] * row
        if not np.all(np.isfinite(out)):
            raise DomainError(
                "interpolation stencil reaches outside the disk interior"
            )
        return out

    return sample
