"""Trap location and characterization for chip assemblies.

The trapping potential for a weak-field-seeking state is the adiabatic
scalar potential U = mu |B| plus gravity.  Minima are located with a
derivative-free simplex descent followed by a damped Newton refinement on
finite-difference derivatives; characterization derives frequencies from
the Hessian eigen-decomposition and probes the depth along the physically
relevant escape paths.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .constants import G_F, HBAR, K_B, M_RB87, MU_B
from .errors import NoTrapError, SaddlePointError, UnphysicalTrapError
from .fieldsolver import (
    SourceTable,
    field_hessian_of_magnitude,
    field_jacobian,
    field_of_table,
    segment_distances,
    source_table,
)
from .geometry import EPS_WIRE, ChipAssembly, Vec3, as_vec3

#: |B| below this is treated as a field zero (quadrupole, not Ioffe)
ZERO_FIELD_TOL = 1e-7

_POSITION_TOL = 1e-8      # m, convergence goal for minima
_GRADIENT_TOL = 1e-9      # J/m, stationarity bound (loose at these scales)
_HESSIAN_STEP = 2e-6      # m
_GRAD_STEP = 1e-6         # m
_MAX_EVALS = 10_000
_SEARCH_RADIUS = 10e-3    # m, leaving this basin around the seed = no trap


@dataclass(frozen=True)
class SpinState:
    """A Zeeman sublevel; trapping requires g_F * m_F > 0."""

    F: int
    m_F: int
    g_F: float

    def __post_init__(self):
        if abs(self.m_F) > self.F:
            raise ValueError("|m_F| must not exceed F")

    @property
    def moment(self) -> float:
        """Magnetic moment mu = g_F m_F mu_B, J/T."""
        return self.g_F * self.m_F * MU_B

    @property
    def weak_field_seeking(self) -> bool:
        return self.g_F * self.m_F > 0


def spin_state(F: int, m_F: int) -> SpinState:
    return SpinState(F, m_F, G_F[F])


RB87_F2_M2 = spin_state(2, 2)


@dataclass(frozen=True)
class TrapReport:
    position: np.ndarray        # m
    b0: float                   # T at the minimum
    gradient: np.ndarray        # (3,) |grad |B|| projections, T/m
    frequencies: np.ndarray     # (3,) Hz, ascending
    principal_axes: np.ndarray  # (3, 3), rows match frequencies
    depth_j: float
    depth_uk: float
    distance_to_chip: float     # m (= y coordinate)
    spin: SpinState


@dataclass(frozen=True)
class QuadrupoleReport:
    zero_position: np.ndarray   # m
    gradient: np.ndarray        # (3, 3) field Jacobian at the zero, T/m
    distance_to_chip: float


@dataclass(frozen=True)
class MajoranaFigure:
    adiabaticity: float
    loss_prone: bool
    threshold: float


def potential(chip: ChipAssembly, spin: SpinState, p: Vec3) -> float:
    """Adiabatic trapping potential mu |B| + gravity, Joule (0 at z = 0)."""
    return potential_many(source_table(chip), spin, as_vec3(p)[None, :],
                          chip.gravity)[0]


def potential_many(table: SourceTable, spin: SpinState, points: np.ndarray,
                   gravity: Vec3) -> np.ndarray:
    points = np.atleast_2d(points)
    B = field_of_table(table, points)
    U = spin.moment * np.linalg.norm(B, axis=-1)
    return U - M_RB87 * points @ np.asarray(gravity)


def _local_scan(table, spin, gravity, seed, half=1.2e-3, n=11):
    """Best point of a coarse grid around the seed (singular points masked).

    The grid spans +-half around the seed in x and z; in y it always
    reaches down to the chip plane, since traps sit between any sensible
    seed and the surface.
    """
    g = np.linspace(-half, half, n)
    ys = np.linspace(5e-6, seed[1] + half, max(n, 25))
    pts = np.stack(np.meshgrid(seed[0] + g, ys, seed[2] + g, indexing="ij"),
                   -1).reshape(-1, 3)
    ok = pts[:, 1] > 2 * EPS_WIRE
    if table.n_segments:
        ok &= segment_distances(table, pts).min(axis=1) > 2 * EPS_WIRE
    pts = pts[ok]
    if not len(pts):
        raise NoTrapError("no admissible points near the seed")
    U = potential_many(table, spin, pts, gravity)
    return pts[int(np.argmin(U))]


def _initial_simplex(seed: np.ndarray, edge: float = 1e-4) -> np.ndarray:
    """Regular, isotropic starting simplex.

    scipy's default simplex uses 0.25 um edges along zero coordinates and
    5% along nonzero ones; the resulting degenerate geometry lets the
    search tunnel over the shallow gravity barrier of chip traps.
    """
    return np.vstack([seed, seed + edge * np.eye(3)])


def _fd_gradient(f, p, h):
    g = np.empty(3)
    for i, e in enumerate(np.eye(3)):
        g[i] = (f(p + h * e) - f(p - h * e)) / (2 * h)
    return g


def _fd_hessian(f, p, h):
    H = np.empty((3, 3))
    f0 = f(p)
    eye = np.eye(3)
    for i in range(3):
        H[i, i] = (f(p + h * eye[i]) - 2 * f0 + f(p - h * eye[i])) / h**2
    for i in range(3):
        for j in range(i + 1, 3):
            H[i, j] = H[j, i] = (
                f(p + h * eye[i] + h * eye[j]) - f(p + h * eye[i] - h * eye[j])
                - f(p - h * eye[i] + h * eye[j]) + f(p - h * eye[i] - h * eye[j])
            ) / (4 * h**2)
    return H


def _newton_refine(f, p, seed, budget):
    """Damped Newton descent on f from p; returns the refined point."""
    evals = [0]

    def fc(x):
        evals[0] += 1
        return f(x)

    for _ in range(60):
        if evals[0] > budget:
            raise NoTrapError("minimizer exceeded its evaluation budget")
        g = _fd_gradient(fc, p, _GRAD_STEP)
        H = _fd_hessian(fc, p, _HESSIAN_STEP)
        w = np.linalg.eigvalsh(H)
        reg = 0.0 if w[0] > 0 else abs(w[0]) * 1.5 + 1e-3 * abs(w[-1]) + 1e-300
        try:
            step = -np.linalg.solve(H + reg * np.eye(3), g)
        except np.linalg.LinAlgError:
            raise NoTrapError("singular Hessian; no trap curvature") from None
        # step control: halve until the potential does not increase
        base = fc(p)
        alpha = 1.0
        for _ in range(25):
            cand = p + alpha * step
            if fc(cand) <= base:
                break
            alpha *= 0.5
        p = p + alpha * step
        if np.linalg.norm(p - seed) > _SEARCH_RADIUS:
            raise NoTrapError("search left the seed basin; no trap found")
        if alpha * np.linalg.norm(step) < 1e-9:
            return p
    raise NoTrapError("Newton refinement did not converge")


def find_minimum(chip: ChipAssembly, spin: SpinState, seed: Vec3) -> np.ndarray:
    """Locate the local minimum of the trapping potential near ``seed``.

    Deterministic for a fixed seed point.  Raises NoTrapError when no
    minimum exists near the seed, UnphysicalTrapError when the minimizer
    lands on a wire or behind the chip plane.
    """
    if not spin.weak_field_seeking:
        raise NoTrapError(f"spin state {spin} is not weak-field seeking")
    seed = as_vec3(seed)
    table = source_table(chip)
    gravity = chip.gravity

    # coarse local scan keeps the simplex stage from hopping the shallow
    # gravity barrier of chip traps during a long initial descent
    start = _local_scan(table, spin, gravity, seed)
    evals = [0]

    def f(x):
        evals[0] += 1
        if np.linalg.norm(x - start) > 2.5e-3:
            return 1e9 * (1.0 + np.linalg.norm(x - start))
        return potential_many(table, spin, x[None, :], gravity)[0]

    res = minimize(f, start, method="Nelder-Mead",
                   options=dict(xatol=1e-9, fatol=1e-32, maxfev=6000,
                                initial_simplex=_initial_simplex(start, edge=5e-5)))
    p = np.asarray(res.x, dtype=float)
    if np.linalg.norm(p - start) > 2.5e-3 - 1e-6:
        raise NoTrapError("no potential minimum near the seed point")

    B0 = np.linalg.norm(field_of_table(table, p[None, :])[0])
    if B0 > ZERO_FIELD_TOL:
        # smooth Ioffe-type minimum: polish with damped Newton
        p = _newton_refine(f, p, seed, _MAX_EVALS - evals[0])
    else:
        # |B| ~ 0: the potential has a conical cusp; polish on |B|^2
        def b2(x):
            b = field_of_table(table, x[None, :])[0]
            return float(b @ b)

        p = _newton_refine(b2, p, seed, _MAX_EVALS - evals[0])

    _check_physical(table, p)
    return p


def _check_physical(table: SourceTable, p: np.ndarray) -> None:
    if p[1] <= 0.0:
        raise UnphysicalTrapError(
            f"converged point {p.tolist()} lies on or behind the chip plane")
    if table.n_segments:
        d = segment_distances(table, p[None, :]).min()
        if d < EPS_WIRE:
            raise UnphysicalTrapError(
                f"converged point {p.tolist()} lies within {EPS_WIRE:g} m of a wire")


def frequencies_from_hessian(H: np.ndarray, mass: float = M_RB87):
    """Oscillation frequencies (Hz) and axes from a potential Hessian (J/m^2)."""
    lam, vecs = np.linalg.eigh(H)
    if np.any(lam <= 0.0):
        raise SaddlePointError(
            f"stationary point is not a minimum: curvatures {lam.tolist()}")
    freqs = np.sqrt(lam / mass) / (2 * np.pi)
    return freqs, vecs.T  # rows are principal axes, ascending frequency


def characterize(chip: ChipAssembly, spin: SpinState, seed: Vec3) -> TrapReport:
    """Full trap report: position, bottom field, frequencies, depth."""
    pos = find_minimum(chip, spin, seed)
    table = source_table(chip)
    B0 = float(np.linalg.norm(field_of_table(table, pos[None, :])[0]))

    H_U = spin.moment * field_hessian_of_magnitude(table, pos, h=_HESSIAN_STEP)
    freqs, axes = frequencies_from_hessian(H_U)

    gradB = _fd_gradient(
        lambda x: float(np.linalg.norm(field_of_table(table, x[None, :])[0])),
        pos, _GRAD_STEP)
    grad_principal = np.abs(axes @ gradB)

    U_min = potential_many(table, spin, pos[None, :], chip.gravity)[0]
    depth_j = _probe_depth(table, spin, chip.gravity, pos, axes, U_min)

    return TrapReport(
        position=pos, b0=B0, gradient=grad_principal, frequencies=freqs,
        principal_axes=axes, depth_j=depth_j, depth_uk=depth_j / K_B * 1e6,
        distance_to_chip=float(pos[1]), spin=spin,
    )


def _probe_depth(table, spin, gravity, pos, axes, U_min, reach=5e-3, n=400):
    """Barrier height along the escape probes: surface ray + principal axes.

    Each probe is truncated at the chip plane (reaching y <= 0 means the
    atom is lost to the surface) and at the filament exclusion radius.
    """
    probes = [np.array([0.0, -1.0, 0.0])]
    for v in axes:
        probes.append(v)
        probes.append(-v)
    depth = np.inf
    for direction in probes:
        t_max = reach
        if direction[1] < 0:  # hits the chip plane first
            t_max = min(t_max, -pos[1] / direction[1])
        ts = np.linspace(0.0, t_max, n)[1:]
        pts = pos + ts[:, None] * direction
        ok = pts[:, 1] >= 0.0
        if table.n_segments:
            ok &= segment_distances(table, pts).min(axis=1) > 2 * EPS_WIRE
        if not np.any(ok):
            continue
        U = potential_many(table, spin, pts[ok], gravity)
        depth = min(depth, float(np.max(U) - U_min))
    return max(depth, 0.0)


def quadrupole_report(chip: ChipAssembly, seed: Vec3) -> QuadrupoleReport:
    """Locate a |B| zero near the seed and report the gradient tensor there.

    Gravity is ignored: quadrupole (MOT) stages are light-dominated.
    """
    seed = as_vec3(seed)
    table = source_table(chip)

    def b2(x):
        if np.linalg.norm(x - seed) > _SEARCH_RADIUS:
            return 1e9
        b = field_of_table(table, x[None, :])[0]
        return float(b @ b)

    res = minimize(b2, seed, method="Nelder-Mead",
                   options=dict(xatol=1e-10, fatol=1e-40, maxfev=6000,
                                initial_simplex=_initial_simplex(seed)))
    p = _newton_refine(b2, np.asarray(res.x), seed, _MAX_EVALS)
    Bmin = np.linalg.norm(field_of_table(table, p[None, :])[0])
    if Bmin > ZERO_FIELD_TOL:
        raise NoTrapError(
            f"no field zero near seed: residual |B| = {Bmin:.3e} T "
            f"(Ioffe-type minimum?)")
    _check_physical(table, p)
    return QuadrupoleReport(zero_position=p, gradient=field_jacobian(table, p),
                            distance_to_chip=float(p[1]))


def majorana_figure(report: TrapReport, threshold: float = 10.0) -> MajoranaFigure:
    """Adiabaticity parameter A = mu B0 / (hbar w_max); small A = loss-prone."""
    w_max = 2 * np.pi * float(np.max(report.frequencies))
    A = report.spin.moment * report.b0 / (HBAR * w_max)
    return MajoranaFigure(adiabaticity=A, loss_prone=bool(A < threshold),
                          threshold=threshold)


TRAP_REPORT_SCHEMA_VERSION = 1


def report_to_dict(report: TrapReport) -> dict:
    """Flat JSON-ready dict: SI values plus convenience units."""
    f = np.sort(report.frequencies)
    d = {
        "schema_version": TRAP_REPORT_SCHEMA_VERSION,
        "x_m": report.position[0], "y_m": report.position[1],
        "z_m": report.position[2],
        "b0_T": report.b0, "b0_G": report.b0 * 1e4,
        "grad1_T_per_m": report.gradient[0], "grad2_T_per_m": report.gradient[1],
        "grad3_T_per_m": report.gradient[2],
        "f1_Hz": f[0], "f2_Hz": f[1], "f3_Hz": f[2],
        "depth_J": report.depth_j, "depth_uK": report.depth_uk,
        "distance_m": report.distance_to_chip,
        "distance_um": report.distance_to_chip * 1e6,
        "F": report.spin.F, "m_F": report.spin.m_F, "g_F": report.spin.g_F,
    }
    return {k: (float(v) if isinstance(v, (np.floating, float)) else v)
            for k, v in d.items()}


def report_to_json(report: TrapReport) -> str:
    return json.dumps(report_to_dict(report), indent=2)
