"""Monte-Carlo dynamics of the trapped cloud.

Atoms move in the adiabatic potential U = mu |B| + m g z under
velocity-Verlet integration; the force is the central difference of U
(1 um step), evaluated in a compiled kernel.  Loss channels per step:
sticking to the chip surface (y <= 0), nonadiabatic spin flips (Larmor
criterion), background-gas collisions (Poisson) and escape from the
probe region.  Atoms are statistically independent, each owning a
counter-based random stream keyed by (master seed, atom id), so results
are bitwise identical for any worker count.
"""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from numpy.random import Generator, Philox

from .constants import G_EARTH, G_F, HBAR, K_B, M_RB87, MU_B
from .errors import ConfigurationError, NoTrapError, SingularityError
from .fieldsolver import field_of_table, source_table
from .geometry import EPS_WIRE, ChipAssembly
from .trapanalysis import TrapReport, characterize

# compile-time constants for the kernel
_M_INV = 1.0 / M_RB87
_HBAR = HBAR
_G = G_EARTH
_EPS_WIRE_SQ = EPS_WIRE**2

LOSS_NONE, LOSS_SURFACE, LOSS_SPIN_FLIP, LOSS_BACKGROUND, LOSS_UNTRAPPED = range(5)
LOSS_NAMES = ("none", "surface", "spin_flip", "background", "untrapped")

_NEVER = np.int64(2**62)


@dataclass(frozen=True)
class CloudSpec:
    """Initial cloud: Gaussian positions, Maxwell-Boltzmann velocities.

    Defaults follow the compressed on-chip MOT (sigma = dimension / 2,
    long axis along x); ``center`` is mandatory (usually the trap
    position).  ``populations`` maps F=2 sublevels m_F to fractions.
    """

    n: int
    temperature: float
    center: tuple[float, float, float]
    sigmas: tuple[float, float, float] = (600e-6, 190e-6, 190e-6)
    populations: dict[int, float] = field(default_factory=lambda: {2: 1.0})

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("cloud needs at least one atom")
        if self.temperature < 0:
            raise ConfigurationError("temperature must be >= 0")
        if any(s <= 0 for s in self.sigmas):
            raise ConfigurationError("cloud sigmas must be > 0")
        total = sum(self.populations.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigurationError(f"spin populations sum to {total}, not 1")
        if any(abs(mf) > 2 for mf in self.populations):
            raise ConfigurationError("populations are F=2 sublevels, |m_F| <= 2")


@dataclass
class AtomEnsemble:
    """Struct-of-arrays atom state; index == rng stream id."""

    positions: np.ndarray   # (N, 3) m
    velocities: np.ndarray  # (N, 3) m/s
    m_f: np.ndarray         # (N,) int
    moments: np.ndarray     # (N,) J/T
    alive: np.ndarray       # (N,) bool
    loss_cause: np.ndarray  # (N,) int8
    master_seed: int

    @property
    def n(self) -> int:
        return len(self.moments)

    def copy(self) -> "AtomEnsemble":
        return AtomEnsemble(self.positions.copy(), self.velocities.copy(),
                            self.m_f.copy(), self.moments.copy(),
                            self.alive.copy(), self.loss_cause.copy(),
                            self.master_seed)


def sample_cloud(spec: CloudSpec, master_seed: int) -> AtomEnsemble:
    """Sample an ensemble; bitwise deterministic for a fixed seed."""
    rng = Generator(Philox(key=np.uint64(master_seed)))
    pos = spec.center + rng.standard_normal((spec.n, 3)) * np.asarray(spec.sigmas)
    v_th = np.sqrt(K_B * spec.temperature / M_RB87)
    vel = rng.standard_normal((spec.n, 3)) * v_th
    u = rng.random(spec.n)
    mfs = sorted(spec.populations)
    edges = np.cumsum([spec.populations[mf] for mf in mfs])
    idx = np.searchsorted(edges, u, side="right").clip(0, len(mfs) - 1)
    m_f = np.array([mfs[i] for i in idx], dtype=np.int64)
    moments = G_F[2] * m_f * MU_B
    return AtomEnsemble(
        positions=pos, velocities=vel, m_f=m_f, moments=moments,
        alive=np.ones(spec.n, dtype=bool),
        loss_cause=np.zeros(spec.n, dtype=np.int8),
        master_seed=int(master_seed),
    )


@dataclass(frozen=True)
class LossConfig:
    surface: bool = True
    spin_flip: bool = True
    background: bool = True
    untrapped: bool = True
    tau_background: float = 115.0     # s, measured vacuum lifetime of the reference experiment
    chi: float = 2.0e4                # Larmor criterion threshold (see README)
    escape_radius: float = 5e-3       # m, probe region around the trap


def losses_off() -> LossConfig:
    return LossConfig(surface=False, spin_flip=False, background=False,
                      untrapped=False)


@dataclass
class SimResult:
    times: np.ndarray               # (M,) s
    alive: np.ndarray               # (M,) int
    counts: dict[str, np.ndarray]   # cause -> (M,) cumulative losses
    temperature: np.ndarray         # (M,) K, kinetic, alive atoms
    ensemble: AtomEnsemble          # final state
    master_seed: int
    dt: float


@njit(cache=True, fastmath=True)
def _propagate_chunk(pos, vel, acc, bprev, moments, state, bg_step,
                     starts, ends, currents, bias,
                     dt, h, steps, step0, chi,
                     do_surface, do_flip, do_untrap,
                     center, escape_r2, rec_steps, rec_state, rec_v2):
    """Velocity-Verlet propagation of one atom chunk.

    Mutates the state arrays in place; snapshots the loss state and v^2
    into rec_* rows whenever the absolute step index hits rec_steps.
    Returns the index of an atom that hit a filament, or -1.
    """
    n = pos.shape[0]
    n_seg = starts.shape[0]
    pref = 1e-7  # mu0 / 4 pi
    m_inv = _M_INV
    rec_i = 0
    while rec_i < rec_steps.shape[0] and rec_steps[rec_i] <= step0:
        rec_i += 1
    b = np.empty((7, 3))
    pts = np.empty((7, 3))
    seg_u = ends - starts
    seg_uu = (seg_u[:, 0]**2 + seg_u[:, 1]**2 + seg_u[:, 2]**2)
    # wire-proximity checks only matter below this height (filaments all
    # sit on or behind the chip plane)
    y_guard = starts[:, 1].max() if n_seg else 0.0
    y_guard = max(y_guard, ends[:, 1].max() if n_seg else 0.0) + 2e-6
    for s in range(steps):
        abs_step = step0 + s + 1
        for i in range(n):
            if state[i] != 0:
                continue
            vx = vel[i, 0] + 0.5 * dt * acc[i, 0]
            vy = vel[i, 1] + 0.5 * dt * acc[i, 1]
            vz = vel[i, 2] + 0.5 * dt * acc[i, 2]
            px = pos[i, 0] + dt * vx
            py = pos[i, 1] + dt * vy
            pz = pos[i, 2] + dt * vz
            pos[i, 0], pos[i, 1], pos[i, 2] = px, py, pz
            if do_surface and py <= 0.0:
                vel[i, 0], vel[i, 1], vel[i, 2] = vx, vy, vz
                state[i] = 1
                continue
            # stencil: 0 center, then +-x, +-y, +-z
            for k in range(7):
                pts[k, 0] = px
                pts[k, 1] = py
                pts[k, 2] = pz
            pts[1, 0] += h
            pts[2, 0] -= h
            pts[3, 1] += h
            pts[4, 1] -= h
            pts[5, 2] += h
            pts[6, 2] -= h
            for k in range(7):
                b[k, 0] = bias[0]
                b[k, 1] = bias[1]
                b[k, 2] = bias[2]
            hit_wire = False
            check_clearance = py < y_guard
            for g in range(n_seg):
                ax, ay, az = starts[g, 0], starts[g, 1], starts[g, 2]
                ex, ey, ez = ends[g, 0], ends[g, 1], ends[g, 2]
                if check_clearance:
                    t = ((px - ax) * seg_u[g, 0] + (py - ay) * seg_u[g, 1]
                         + (pz - az) * seg_u[g, 2]) / seg_uu[g]
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                    dxw = px - (ax + t * seg_u[g, 0])
                    dyw = py - (ay + t * seg_u[g, 1])
                    dzw = pz - (az + t * seg_u[g, 2])
                    if dxw * dxw + dyw * dyw + dzw * dzw < _EPS_WIRE_SQ:
                        hit_wire = True
                        break
                cI = pref * currents[g]
                for k in range(7):
                    r1x, r1y, r1z = pts[k, 0] - ax, pts[k, 1] - ay, pts[k, 2] - az
                    r2x, r2y, r2z = pts[k, 0] - ex, pts[k, 1] - ey, pts[k, 2] - ez
                    n1 = np.sqrt(r1x * r1x + r1y * r1y + r1z * r1z)
                    n2 = np.sqrt(r2x * r2x + r2y * r2y + r2z * r2z)
                    denom = n1 * n2 * (n1 * n2 + r1x * r2x + r1y * r2y + r1z * r2z)
                    if denom > 0.0:
                        w = cI * (n1 + n2) / denom
                        b[k, 0] += w * (r1y * r2z - r1z * r2y)
                        b[k, 1] += w * (r1z * r2x - r1x * r2z)
                        b[k, 2] += w * (r1x * r2y - r1y * r2x)
            if hit_wire:
                vel[i, 0], vel[i, 1], vel[i, 2] = vx, vy, vz
                state[i] = -1
                return i
            mu = moments[i]
            gx = (np.sqrt(b[1, 0]**2 + b[1, 1]**2 + b[1, 2]**2)
                  - np.sqrt(b[2, 0]**2 + b[2, 1]**2 + b[2, 2]**2)) / (2 * h)
            gy = (np.sqrt(b[3, 0]**2 + b[3, 1]**2 + b[3, 2]**2)
                  - np.sqrt(b[4, 0]**2 + b[4, 1]**2 + b[4, 2]**2)) / (2 * h)
            gz = (np.sqrt(b[5, 0]**2 + b[5, 1]**2 + b[5, 2]**2)
                  - np.sqrt(b[6, 0]**2 + b[6, 1]**2 + b[6, 2]**2)) / (2 * h)
            ax_new = -mu * gx * m_inv
            ay_new = -mu * gy * m_inv
            az_new = -mu * gz * m_inv - _G
            acc[i, 0], acc[i, 1], acc[i, 2] = ax_new, ay_new, az_new
            vel[i, 0] = vx + 0.5 * dt * ax_new
            vel[i, 1] = vy + 0.5 * dt * ay_new
            vel[i, 2] = vz + 0.5 * dt * az_new
            # Larmor adiabaticity test against the previous-step field
            bcx, bcy, bcz = b[0, 0], b[0, 1], b[0, 2]
            if do_flip and mu > 0.0:
                bc = np.sqrt(bcx * bcx + bcy * bcy + bcz * bcz)
                bp = np.sqrt(bprev[i, 0]**2 + bprev[i, 1]**2 + bprev[i, 2]**2)
                if bc <= 0.0 or bp <= 0.0:
                    state[i] = 2
                    continue
                cosang = (bcx * bprev[i, 0] + bcy * bprev[i, 1]
                          + bcz * bprev[i, 2]) / (bc * bp)
                if cosang > 1.0:
                    cosang = 1.0
                elif cosang < -1.0:
                    cosang = -1.0
                omega_rot = np.arccos(cosang) / dt
                bmin = bc if bc < bp else bp
                omega_larmor = mu * bmin / _HBAR
                if omega_larmor < chi * omega_rot:
                    state[i] = 2
                    bprev[i, 0], bprev[i, 1], bprev[i, 2] = bcx, bcy, bcz
                    continue
            bprev[i, 0], bprev[i, 1], bprev[i, 2] = bcx, bcy, bcz
            if abs_step >= bg_step[i]:
                state[i] = 3
                continue
            if do_untrap:
                dx = px - center[0]
                dy = py - center[1]
                dz = pz - center[2]
                if dx * dx + dy * dy + dz * dz > escape_r2:
                    state[i] = 4
                    continue
        if rec_i < rec_steps.shape[0] and abs_step == rec_steps[rec_i]:
            for i in range(n):
                rec_state[rec_i, i] = state[i]
                rec_v2[rec_i, i] = (vel[i, 0]**2 + vel[i, 1]**2 + vel[i, 2]**2)
            rec_i += 1
    return -1


def _background_steps(n, master_seed, dt, tau, enabled) -> np.ndarray:
    """Per-atom death step for the background Poisson process.

    One inverse-CDF draw per atom from its own counter-based stream is
    equal in law to a Bernoulli(dt/tau) trial per step and keeps results
    independent of worker count and step batching.
    """
    if not enabled:
        return np.full(n, _NEVER)
    rng = Generator(Philox(key=np.uint64(master_seed) + np.uint64(0x9E3779B9)))
    u = rng.random(n)
    p = dt / tau
    if p <= 0.0:
        return np.full(n, _NEVER)
    if p >= 1.0:
        return np.ones(n, dtype=np.int64)
    steps = np.floor(np.log1p(-u) / np.log1p(-p)).astype(np.int64) + 1
    return steps


def _chunk_worker(args):
    (sl, pos, vel, acc, bprev, moments, state, bg_step, starts, ends, currents,
     bias, dt, h, intervals, chi, flags, center, escape_r2, rec_steps) = args
    pos, vel, acc, bprev = (a[sl].copy() for a in (pos, vel, acc, bprev))
    moments, state, bg_step = (a[sl].copy() for a in (moments, state, bg_step))
    n = pos.shape[0]
    rec_state = np.zeros((len(rec_steps), n), dtype=np.int8)
    rec_v2 = np.zeros((len(rec_steps), n))
    do_surface, do_flip, do_untrap = flags
    step0 = 0
    for steps in intervals:
        bad = _propagate_chunk(pos, vel, acc, bprev, moments, state, bg_step,
                               starts, ends, currents, bias, dt, h, steps,
                               step0, chi, do_surface, do_flip, do_untrap,
                               center, escape_r2,
                               np.asarray(rec_steps, dtype=np.int64),
                               rec_state, rec_v2)
        if bad >= 0:
            return ("singular", sl.start + bad, pos[bad].copy())
        step0 += steps
    return ("ok", sl, pos, vel, state, rec_state, rec_v2)


def evolve(chip: ChipAssembly, ensemble: AtomEnsemble, dt: float, t_end: float,
           losses: LossConfig = LossConfig(), record_times=None,
           workers: int = 1) -> SimResult:
    """Propagate the ensemble to t_end, recording at ``record_times``.

    The time step must satisfy dt <= 1/(50 f_max) when the configuration
    holds a trap.  Dead atoms retain their final state and cause.
    """
    if t_end < dt:
        raise ConfigurationError("t_end must be at least one step")
    table = source_table(chip, skip_zero_current=True)
    trap = _try_characterize(chip, ensemble)
    if trap is not None:
        f_max = float(np.max(trap.frequencies))
        if dt > 1.0 / (50.0 * f_max):
            raise ConfigurationError(
                f"dt={dt:g} too large: trap frequency {f_max:.1f} Hz needs "
                f"dt <= {1.0 / (50.0 * f_max):.3g} s")
        center = trap.position
    else:
        center = ensemble.positions.mean(axis=0)

    if record_times is None:
        record_times = [t_end]
    rec_steps = np.unique(np.maximum(
        np.round(np.asarray(record_times, dtype=float) / dt), 1).astype(np.int64))
    n_total = int(np.round(t_end / dt))
    rec_steps = rec_steps[rec_steps <= n_total]
    if len(rec_steps) == 0 or rec_steps[-1] != n_total:
        rec_steps = np.append(rec_steps, n_total)

    ens = ensemble.copy()
    state = np.where(ens.alive, 0, ens.loss_cause).astype(np.int8)
    bg_step = _background_steps(ens.n, ens.master_seed, dt,
                                losses.tau_background, losses.background)
    bprev = field_of_table(table, ens.positions, check=False)
    acc = _initial_acceleration(table, ens)

    # intervals between recordings (kernel checks only at interval ends)
    bounds = np.concatenate([[0], rec_steps])
    intervals = tuple(int(b - a) for a, b in zip(bounds[:-1], bounds[1:]))
    flags = (losses.surface, losses.spin_flip, losses.untrapped)
    args_common = (ens.positions, ens.velocities, acc, bprev, ens.moments,
                   state, bg_step, table.starts, table.ends, table.currents,
                   table.bias, dt, 1e-6, intervals, losses.chi, flags,
                   np.asarray(center), losses.escape_radius**2, rec_steps)

    workers = max(1, int(workers))
    slices = _atom_slices(ens.n, workers)
    payloads = [(sl,) + args_common for sl in slices]
    if workers == 1:
        results = [_chunk_worker(payloads[0])]
    else:
        with multiprocessing.get_context("fork").Pool(workers) as pool:
            results = pool.map(_chunk_worker, payloads)

    rec_state = np.zeros((len(rec_steps), ens.n), dtype=np.int8)
    rec_v2 = np.zeros((len(rec_steps), ens.n))
    for res in results:
        if res[0] == "singular":
            _, idx, p = res
            raise SingularityError(
                f"atom {idx} hit a filament at {p.tolist()}",
                point=p)
        _, sl, pos, vel, st, rst, rv2 = res
        ens.positions[sl] = pos
        ens.velocities[sl] = vel
        state[sl] = st
        rec_state[:, sl] = rst
        rec_v2[:, sl] = rv2

    ens.alive = state == 0
    ens.loss_cause = state
    times = rec_steps * dt
    alive_counts = (rec_state == 0).sum(axis=1)
    counts = {name: (rec_state == code).sum(axis=1)
              for code, name in enumerate(LOSS_NAMES) if code != LOSS_NONE}
    temperature = np.empty(len(rec_steps))
    for k in range(len(rec_steps)):
        mask = rec_state[k] == 0
        temperature[k] = (M_RB87 * rec_v2[k][mask].sum() / (3 * K_B * mask.sum())
                          if mask.any() else 0.0)
    return SimResult(times=times, alive=alive_counts, counts=counts,
                     temperature=temperature, ensemble=ens,
                     master_seed=ensemble.master_seed, dt=dt)


def _atom_slices(n, workers):
    edges = np.linspace(0, n, workers + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _initial_acceleration(table, ens):
    h = 1e-6
    n = ens.n
    offsets = np.array([[h, 0, 0], [-h, 0, 0], [0, h, 0],
                        [0, -h, 0], [0, 0, h], [0, 0, -h]])
    pts = (ens.positions[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    Bn = np.linalg.norm(field_of_table(table, pts, check=False), axis=-1)
    Bn = Bn.reshape(n, 6)
    grad = np.stack([(Bn[:, 0] - Bn[:, 1]) / (2 * h),
                     (Bn[:, 2] - Bn[:, 3]) / (2 * h),
                     (Bn[:, 4] - Bn[:, 5]) / (2 * h)], axis=1)
    acc = -(ens.moments[:, None] * grad) / M_RB87
    acc[:, 2] -= G_EARTH
    return acc


def _try_characterize(chip, ensemble) -> TrapReport | None:
    try:
        return characterize(chip, _dominant_spin(ensemble),
                            ensemble.positions.mean(axis=0))
    except NoTrapError:
        return None


def _dominant_spin(ensemble):
    from .trapanalysis import spin_state

    mf = int(np.max(ensemble.m_f))
    return spin_state(2, mf if mf > 0 else 2)


@dataclass(frozen=True)
class TofResult:
    t_flight: float
    positions: np.ndarray
    widths: np.ndarray  # (3,) sample standard deviation per axis


def time_of_flight(ensemble: AtomEnsemble, t_flight: float) -> TofResult:
    """Ballistic expansion of the alive atoms for t_flight seconds."""
    if t_flight < 0:
        raise ConfigurationError("flight time must be >= 0")
    alive = ensemble.alive
    r = ensemble.positions[alive]
    v = ensemble.velocities[alive]
    g = np.array([0.0, 0.0, -G_EARTH])
    expanded = r + v * t_flight + 0.5 * g * t_flight**2
    widths = expanded.std(axis=0, ddof=1)
    return TofResult(t_flight, expanded, widths)


def decay_curve(chip: ChipAssembly, spec: CloudSpec, hold_times,
                losses: LossConfig, master_seed: int, dt: float = 1e-6,
                workers: int = 1) -> SimResult:
    """Sample a cloud and record the loss statistics at the hold times."""
    hold_times = np.asarray(hold_times, dtype=float)
    if np.any(np.diff(hold_times) <= 0):
        raise ConfigurationError("hold times must be strictly increasing")
    if hold_times[0] < 0.05:
        raise ConfigurationError("shortest hold time is 50 ms")
    ens = sample_cloud(spec, master_seed)
    return evolve(chip, ens, dt, float(hold_times[-1]), losses,
                  record_times=hold_times, workers=workers)


def ensemble_energy(chip: ChipAssembly, ensemble: AtomEnsemble) -> np.ndarray:
    """Per-atom total energy (kinetic + potential), for conservation checks."""
    table = source_table(chip, skip_zero_current=True)
    B = field_of_table(table, ensemble.positions, check=False)
    pot = (ensemble.moments * np.linalg.norm(B, axis=-1)
           - M_RB87 * ensemble.positions @ np.asarray(chip.gravity))
    kin = 0.5 * M_RB87 * np.sum(ensemble.velocities**2, axis=-1)
    return kin + pot


DECAY_CSV_HEADER = "t_s,N_alive,N_surface,N_spinflip,N_background,N_untrapped,T_kinetic_K"


def write_decay_csv(result: SimResult, path: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# master_seed={result.master_seed} dt={result.dt:.9g}\n")
        fh.write(DECAY_CSV_HEADER + "\n")
        for k, t in enumerate(result.times):
            fh.write("%.9g,%d,%d,%d,%d,%d,%.9g\n" % (
                t, result.alive[k], result.counts["surface"][k],
                result.counts["spin_flip"][k], result.counts["background"][k],
                result.counts["untrapped"][k], result.temperature[k]))


SNAPSHOT_CSV_HEADER = ("atom_id,x_m,y_m,z_m,vx_m_s,vy_m_s,vz_m_s,"
                       "m_F,alive,loss_cause")


def write_snapshot_csv(ensemble: AtomEnsemble, path: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# master_seed={ensemble.master_seed}\n")
        fh.write(SNAPSHOT_CSV_HEADER + "\n")
        for i in range(ensemble.n):
            p, v = ensemble.positions[i], ensemble.velocities[i]
            fh.write("%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%d,%d,%s\n" % (
                i, p[0], p[1], p[2], v[0], v[1], v[2], ensemble.m_f[i],
                int(ensemble.alive[i]), LOSS_NAMES[ensemble.loss_cause[i]]))
