"""Magnetostatic field, gradient and Hessian evaluation for a chip.

The field of a straight filament uses the Hanson-Hirshman form

    B = (mu0 I / 4 pi) * (R1 + R2) / (R1 R2 (R1 R2 + r1.r2)) * (r1 x r2),

with r1/r2 the vectors from the endpoints to the field point.  It is
exact for a filament and stays well-conditioned near the on-axis
extensions of the segment, where the textbook sine form cancels
catastrophically.  Derivatives are central finite differences, validated
by the Maxwell checks (div B = 0, curl B = 0) in the test suite.

All evaluations sum sources in a fixed order, so results do not depend
on scheduling or batching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constants import MU0
from .errors import SingularityError
from .geometry import EPS_WIRE, ChipAssembly, Vec3, WireSegment, as_vec3

_PREF = MU0 / (4.0 * np.pi)


@dataclass(frozen=True)
class SourceTable:
    """Flattened source arrays for repeated field evaluation."""

    starts: np.ndarray   # (S, 3)
    ends: np.ndarray     # (S, 3)
    currents: np.ndarray  # (S,)
    labels: tuple[str, ...]
    bias: np.ndarray     # (3,)

    @property
    def n_segments(self) -> int:
        return len(self.currents)


def source_table(chip: ChipAssembly, skip_zero_current: bool = True) -> SourceTable:
    segs = chip.all_segments(skip_zero_current=skip_zero_current)
    if segs:
        starts = np.array([s.start for s in segs])
        ends = np.array([s.end for s in segs])
        currents = np.array([s.current for s in segs])
        labels = tuple(s.label for s in segs)
    else:
        starts = np.zeros((0, 3))
        ends = np.zeros((0, 3))
        currents = np.zeros(0)
        labels = ()
    return SourceTable(starts, ends, currents, labels, chip.bias_total())


def segment_distances(table: SourceTable, points: np.ndarray) -> np.ndarray:
    """Distance from each point to each segment, shape (P, S)."""
    p = np.atleast_2d(points)[:, None, :]          # (P, 1, 3)
    a = table.starts[None, :, :]                   # (1, S, 3)
    u = (table.ends - table.starts)[None, :, :]
    uu = np.sum(u * u, axis=-1)
    t = np.clip(np.sum((p - a) * u, axis=-1) / uu, 0.0, 1.0)
    foot = a + t[..., None] * u
    return np.linalg.norm(p - foot, axis=-1)


def _check_clearance(table: SourceTable, points: np.ndarray) -> None:
    if table.n_segments == 0:
        return
    d = segment_distances(table, points)
    bad = np.argwhere(d < EPS_WIRE)
    if bad.size:
        ip, iseg = bad[0]
        pt = np.atleast_2d(points)[ip]
        raise SingularityError(
            f"field point {pt.tolist()} is within {EPS_WIRE:g} m of "
            f"conductor {table.labels[iseg]!r}",
            label=table.labels[iseg],
            point=pt,
        )


def field_of_table(table: SourceTable, points: np.ndarray,
                   check: bool = True) -> np.ndarray:
    """Total field at ``points`` (P, 3) -> (P, 3), biases included."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if check:
        _check_clearance(table, points)
    B = np.broadcast_to(table.bias, points.shape).copy()
    if table.n_segments:
        r1 = points[:, None, :] - table.starts[None, :, :]   # (P, S, 3)
        r2 = points[:, None, :] - table.ends[None, :, :]
        n1 = np.linalg.norm(r1, axis=-1)
        n2 = np.linalg.norm(r2, axis=-1)
        denom = n1 * n2 * (n1 * n2 + np.sum(r1 * r2, axis=-1))
        # exactly collinear points give cross = 0 and a vanishing
        # contribution; guard the denominator to avoid 0/0 warnings
        cross = np.cross(r1, r2)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(denom > 0.0, (n1 + n2) / denom, 0.0)
        B = B + np.sum(_PREF * table.currents[None, :, None] * w[..., None] * cross,
                       axis=1)
    return B


def segment_field(seg: WireSegment, p: Vec3) -> Vec3:
    """Field of a single finite straight filament at point p, Tesla."""
    table = SourceTable(
        starts=seg.start[None, :], ends=seg.end[None, :],
        currents=np.array([seg.current]), labels=(seg.label,),
        bias=np.zeros(3),
    )
    return field_of_table(table, as_vec3(p))[0]


def total_field(chip: ChipAssembly, p: Vec3) -> Vec3:
    """Superposition of all wire, coil and bias fields at p, Tesla."""
    return field_of_table(source_table(chip, skip_zero_current=False), as_vec3(p))[0]


def total_field_many(chip: ChipAssembly, points: np.ndarray) -> np.ndarray:
    return field_of_table(source_table(chip), points)


def field_jacobian(chip_or_table, p: Vec3, h: float = 1e-6) -> np.ndarray:
    """J[i, j] = dB_i/dx_j by central differences with step h."""
    table = _as_table(chip_or_table)
    p = as_vec3(p)
    stencil = np.vstack([p + h * e for e in np.eye(3)] +
                        [p - h * e for e in np.eye(3)])
    B = field_of_table(table, stencil)
    return (B[:3] - B[3:]).T / (2.0 * h)


def field_hessian_of_magnitude(chip_or_table, p: Vec3, h: float = 1e-6) -> np.ndarray:
    """Hessian of |B| by central second differences with step h."""
    table = _as_table(chip_or_table)
    p = as_vec3(p)
    eye = np.eye(3)
    pts = [p]
    for i in range(3):
        pts += [p + h * eye[i], p - h * eye[i]]
    for i in range(3):
        for j in range(i + 1, 3):
            d1, d2 = h * eye[i], h * eye[j]
            pts += [p + d1 + d2, p + d1 - d2, p - d1 + d2, p - d1 - d2]
    f = np.linalg.norm(field_of_table(table, np.array(pts)), axis=-1)
    H = np.empty((3, 3))
    k = 1
    for i in range(3):
        H[i, i] = (f[k] - 2.0 * f[0] + f[k + 1]) / h**2
        k += 2
    for i in range(3):
        for j in range(i + 1, 3):
            H[i, j] = H[j, i] = (f[k] - f[k + 1] - f[k + 2] + f[k + 3]) / (4.0 * h**2)
            k += 4
    return H


def _as_table(chip_or_table) -> SourceTable:
    if isinstance(chip_or_table, SourceTable):
        return chip_or_table
    return source_table(chip_or_table)


@dataclass(frozen=True)
class FieldGrid:
    """Regular field sample grid, row-major over (nx, ny, nz)."""

    origin: np.ndarray
    spacing: np.ndarray
    shape: tuple[int, int, int]
    B: np.ndarray      # (nx*ny*nz, 3)
    Bnorm: np.ndarray  # (nx*ny*nz,)

    def points(self) -> np.ndarray:
        return grid_points(self.origin, self.spacing, self.shape)


def grid_points(origin, spacing, shape) -> np.ndarray:
    origin = as_vec3(origin)
    spacing = as_vec3(spacing)
    nx, ny, nz = shape
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                             indexing="ij")
    idx = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3)
    return origin + idx * spacing


def field_map(chip: ChipAssembly, origin, spacing, shape) -> FieldGrid:
    """Sample the field on a regular grid; deterministic row-major order."""
    shape = tuple(int(n) for n in shape)
    if any(n < 1 for n in shape):
        raise ValueError("grid dimensions must be >= 1")
    pts = grid_points(origin, spacing, shape)
    table = source_table(chip)
    if table.n_segments:
        d = segment_distances(table, pts)
        bad = np.argwhere(d < EPS_WIRE)
        if bad.size:
            ip, iseg = bad[0]
            raise SingularityError(
                f"grid point index {int(ip)} at {pts[ip].tolist()} is within "
                f"{EPS_WIRE:g} m of conductor {table.labels[iseg]!r}",
                label=table.labels[iseg], point=pts[ip],
            )
    B = field_of_table(table, pts, check=False)
    return FieldGrid(as_vec3(origin), as_vec3(spacing), shape, B,
                     np.linalg.norm(B, axis=-1))


FIELD_CSV_HEADER = "x_m,y_m,z_m,Bx_T,By_T,Bz_T,Bnorm_T"


def write_field_csv(grid: FieldGrid, path: str) -> None:
    """Write the grid as CSV with 9 significant digits."""
    pts = grid.points()
    with open(path, "w", newline="") as fh:
        fh.write(FIELD_CSV_HEADER + "\n")
        for p, b, n in zip(pts, grid.B, grid.Bnorm):
            fh.write("%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n"
                     % (p[0], p[1], p[2], b[0], b[1], b[2], n))
