"""Command-line front end.

Commands: field-map, trap, sequence {validate,snapshots},
simulate {decay,tof}, fit {biexp,tof,expdecay,pressure}.

Exit codes: 0 success, 1 validation failure, 2 configuration/parse error,
3 numerical singularity, 4 no trap, 5 fit failure.  All outputs are
reproducible: a (config, seed) pair determines every file byte-for-byte,
and simulations require an explicit --seed (no wall-clock seeding).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import ensemble as ens_mod
from .analysis import (
    M_HE,
    PressureQuery,
    fit_biexponential,
    fit_exponential_decay,
    fit_tof,
    infer_pressure,
)
from .ensemble import CloudSpec, LossConfig, decay_curve, sample_cloud, time_of_flight
from .errors import (
    ChiptrapError,
    ConfigurationError,
    FitError,
    NoTrapError,
    SaddlePointError,
    SingularityError,
    UnphysicalTrapError,
)
from .fieldsolver import field_map, write_field_csv
from .geometry import build_default_chip, load_chip_file, parse_quantity
from .trapanalysis import RB87_F2_M2, characterize, report_to_dict
from .sequence import default_sequence, load_sequence_file, snapshots, validate

_EXTRA_UNITS = {"A2": 1e-20, "Angstrom2": 1e-20, "G": 1e-4, "W": 1.0}

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_SINGULAR = 3
EXIT_NO_TRAP = 4
EXIT_FIT = 5


@dataclass
class RunConfig:
    chip_path: str | None
    sequence_path: str | None
    out_dir: str
    emit_plots: bool
    seed: int | None = None


def _quantity(text: str) -> float:
    return parse_quantity(text, extra_units=_EXTRA_UNITS)


def _vec(text: str) -> np.ndarray:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != 3:
        raise ConfigurationError(f"expected three comma-separated values: {text!r}")
    return np.array([_quantity(p) for p in parts])


def _shape(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3 or any(p < 1 for p in parts):
        raise ConfigurationError(f"bad grid shape {text!r}")
    return tuple(parts)


def _times(text: str) -> np.ndarray:
    return np.array([_quantity(p) for p in text.split(",") if p.strip()])


def _run_config(args) -> RunConfig:
    out = getattr(args, "out", None) or os.environ.get("CHIPTRAP_OUT", ".")
    os.makedirs(out, exist_ok=True)
    return RunConfig(
        chip_path=getattr(args, "chip", None),
        sequence_path=getattr(args, "sequence", None),
        out_dir=out,
        emit_plots=bool(getattr(args, "plots", False)),
        seed=getattr(args, "seed", None),
    )


def _load_chip(cfg: RunConfig, overrides=None):
    if cfg.chip_path:
        chip = load_chip_file(cfg.chip_path)
        if overrides:
            raise ConfigurationError(
                "chip override flags cannot be combined with --chip")
        return chip
    return build_default_chip(overrides or None)


def _load_sequence(cfg: RunConfig):
    if cfg.sequence_path:
        return load_sequence_file(cfg.sequence_path)
    return default_sequence()


def _read_csv_columns(path: str) -> dict[str, np.ndarray]:
    try:
        with open(path) as fh:
            rows = [line.strip() for line in fh
                    if line.strip() and not line.startswith("#")]
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ConfigurationError(f"input file {path} is empty")
    header = rows[0].split(",")
    data = [r.split(",") for r in rows[1:]]
    if not data:
        raise ConfigurationError(f"input file {path} has no data rows")
    cols = {}
    for j, name in enumerate(header):
        try:
            cols[name] = np.array([float(r[j]) for r in data])
        except (ValueError, IndexError) as exc:
            raise ConfigurationError(
                f"column {name!r} of {path} is not numeric") from exc
    return cols


# ---------------------------------------------------------------------------
# commands

def cmd_field_map(args) -> int:
    cfg = _run_config(args)
    chip = _load_chip(cfg)
    grid = field_map(chip, _vec(args.origin), _vec(args.spacing),
                     _shape(args.shape))
    path = os.path.join(cfg.out_dir, "field_map.csv")
    write_field_csv(grid, path)
    print(f"wrote {path} ({np.prod(grid.shape)} samples)")
    if cfg.emit_plots:
        for axis, n in enumerate(grid.shape):
            if n == 1:
                svg = os.path.join(cfg.out_dir, f"field_map_{'xyz'[axis]}plane.svg")
                _plot_plane(grid, axis, svg)
                print(f"wrote {svg}")
    return EXIT_OK


def _plot_plane(grid, flat_axis, path):
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    keep = [i for i in range(3) if i != flat_axis]
    ni, nj = grid.shape[keep[0]], grid.shape[keep[1]]
    Bn = grid.Bnorm.reshape(grid.shape)[
        tuple(slice(None) if i != flat_axis else 0 for i in range(3))]
    pts = grid.points()
    u = pts[:, keep[0]].reshape(grid.shape)[
        tuple(slice(None) if i != flat_axis else 0 for i in range(3))]
    v = pts[:, keep[1]].reshape(grid.shape)[
        tuple(slice(None) if i != flat_axis else 0 for i in range(3))]
    fig, ax = plt.subplots(figsize=(6, 5))
    pm = ax.pcolormesh(u * 1e3, v * 1e3, np.log10(np.maximum(Bn, 1e-12)),
                       shading="auto")
    fig.colorbar(pm, ax=ax, label="log10 |B| (T)")
    ax.set_xlabel(f"{'xyz'[keep[0]]} (mm)")
    ax.set_ylabel(f"{'xyz'[keep[1]]} (mm)")
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_trap(args) -> int:
    cfg = _run_config(args)
    overrides = {}
    if args.Bx is not None:
        overrides["bias_x"] = _quantity(args.Bx)
    if args.Bz is not None:
        overrides["bias_z"] = _quantity(args.Bz)
    if args.Iz is not None:
        overrides["z_current"] = _quantity(args.Iz)
    chip = _load_chip(cfg, overrides)
    report = characterize(chip, RB87_F2_M2, _vec(args.seed_point))
    d = report_to_dict(report)
    print(f"distance_um={d['distance_um']:.1f} b0_G={d['b0_G']:.3f} "
          f"f_Hz=({d['f1_Hz']:.1f},{d['f2_Hz']:.1f},{d['f3_Hz']:.1f}) "
          f"depth_uK={d['depth_uK']:.1f}")
    text = json.dumps(d, indent=2)
    print(text)
    path = os.path.join(cfg.out_dir, "trap_report.json")
    with open(path, "w") as fh:
        fh.write(text + "\n")
    return EXIT_OK


def cmd_sequence(args) -> int:
    cfg = _run_config(args)
    seq = _load_sequence(cfg)
    if args.seq_command == "validate":
        violations = validate(seq)
        for v in violations:
            print(v.format())
        return EXIT_VALIDATION if violations else EXIT_OK
    # snapshots
    if args.times:
        times = _times(args.times)
    else:
        starts = seq.stage_start_times()
        # stage ends, skipping the loading stage (its quadrupole sits far
        # from the chip and is not part of the reported compression path)
        times = np.array([t - 1e-9 for t in (starts[2], starts[3])]
                         + [seq.total_duration])
    snaps = snapshots(seq, times)
    path = os.path.join(cfg.out_dir, "sequence_snapshots.csv")
    with open(path, "w", newline="") as fh:
        fh.write("t_s,kind,distance_m,value\n")
        for s in snaps:
            if s.kind == "ioffe":
                value = s.report.b0
            else:
                value = float(np.linalg.norm(s.report.gradient))
            fh.write("%.9g,%s,%.9g,%.9g\n" % (s.t, s.kind, s.distance_to_chip, value))
    print(f"wrote {path}")
    return EXIT_OK


def _loss_config(args) -> LossConfig:
    kw = {}
    if args.losses is not None:
        wanted = set() if args.losses == "none" else set(args.losses.split(","))
        known = {"surface", "spin_flip", "background", "untrapped"}
        unknown = wanted - known
        if unknown:
            raise ConfigurationError(f"unknown loss channel(s): {sorted(unknown)}")
        kw = {name: (name in wanted) for name in known}
    return LossConfig(tau_background=_quantity(args.tau_bg),
                      chi=float(args.chi), **kw)


def cmd_simulate(args) -> int:
    cfg = _run_config(args)
    if cfg.seed is None:
        raise ConfigurationError("simulations require an explicit --seed")
    overrides = {}
    if args.Bx is not None:
        overrides["bias_x"] = _quantity(args.Bx)
    chip = _load_chip(cfg, overrides)
    trap = characterize(chip, RB87_F2_M2, (0.0, 1e-3, 0.0))
    spec = CloudSpec(n=args.n, temperature=_quantity(args.temperature),
                     center=tuple(trap.position))
    print(f"master_seed={cfg.seed} dt={_quantity(args.dt):g}")

    if args.sim_command == "decay":
        if args.times:
            times = _times(args.times)
        else:
            times = np.linspace(0.05, _quantity(args.t_end), args.points)
        result = decay_curve(chip, spec, times, _loss_config(args), cfg.seed,
                             dt=_quantity(args.dt), workers=args.workers)
        path = os.path.join(cfg.out_dir, "decay.csv")
        ens_mod.write_decay_csv(result, path)
        print(f"wrote {path}")
        if cfg.emit_plots:
            svg = os.path.join(cfg.out_dir, "decay.svg")
            _plot_decay(result, svg)
            print(f"wrote {svg}")
        return EXIT_OK

    # tof
    ens = sample_cloud(spec, cfg.seed)
    flights = _times(args.flight_times)
    path = os.path.join(cfg.out_dir, "tof.csv")
    with open(path, "w", newline="") as fh:
        fh.write(f"# master_seed={cfg.seed}\n")
        fh.write("t_s,sigma_x_m,sigma_y_m,sigma_z_m\n")
        for t in flights:
            w = time_of_flight(ens, float(t)).widths
            fh.write("%.9g,%.9g,%.9g,%.9g\n" % (t, w[0], w[1], w[2]))
    print(f"wrote {path}")
    return EXIT_OK


def _plot_decay(result, path):
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(result.times, np.maximum(result.alive, 1), "o-")
    ax.set_xlabel("hold time (s)")
    ax.set_ylabel("atoms in the trap")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_fit(args) -> int:
    if args.fit_command == "pressure":
        q = PressureQuery(tau=float(args.tau),
                          cross_section=_quantity(args.sigma),
                          gas_temperature=float(args.T),
                          gas_mass=M_HE if args.gas == "He" else _quantity(args.gas))
        out = infer_pressure(q)
        print(json.dumps(out, indent=2))
        return EXIT_OK

    cols = _read_csv_columns(args.input)
    if args.fit_command == "biexp":
        fit = fit_biexponential(cols["t_s"], cols["N_alive"])
    elif args.fit_command == "tof":
        fit = fit_tof(cols["t_s"], cols[f"sigma_{args.axis}_m"])
    else:  # expdecay
        fit = fit_exponential_decay(cols["t_s"], cols[args.column])
    print(fit.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="chiptrap",
        description="Superconducting atom-chip trap simulator and analysis")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, seed=False):
        sp.add_argument("--chip", help="chip configuration file (see chip.schema)")
        sp.add_argument("--out", help="output directory (default $CHIPTRAP_OUT or .)")
        sp.add_argument("--plots", action="store_true", help="emit SVG plots")
        if seed:
            sp.add_argument("--seed", type=int, help="master RNG seed (required)")

    fm = sub.add_parser("field-map", help="sample B on a grid, write CSV")
    add_common(fm)
    fm.add_argument("--origin", default="0,0.05mm,-1mm")
    fm.add_argument("--spacing", default="0.1mm,0.1mm,0.1mm")
    fm.add_argument("--shape", default="1,21,21")
    fm.set_defaults(func=cmd_field_map)

    tr = sub.add_parser("trap", help="characterize the trap minimum")
    add_common(tr)
    tr.add_argument("--Bx", help="axial bias override, e.g. '2.75 Gauss'")
    tr.add_argument("--Bz", help="main bias override")
    tr.add_argument("--Iz", help="Z-wire current override")
    tr.add_argument("--seed-point", default="0,1mm,0")
    tr.set_defaults(func=cmd_trap)

    sq = sub.add_parser("sequence", help="validate or sample the ramp sequence")
    add_common(sq)
    sq.add_argument("seq_command", choices=["validate", "snapshots"])
    sq.add_argument("--sequence", help="sequence file (default: built-in)")
    sq.add_argument("--times", help="comma-separated snapshot times")
    sq.set_defaults(func=cmd_sequence)

    sim = sub.add_parser("simulate", help="Monte-Carlo cloud simulation")
    add_common(sim, seed=True)
    sim.add_argument("sim_command", choices=["decay", "tof"])
    sim.add_argument("--n", type=int, default=5000, help="number of atoms")
    sim.add_argument("--temperature", default="80uK")
    sim.add_argument("--dt", default="0.15ms")
    sim.add_argument("--t-end", default="10", dest="t_end")
    sim.add_argument("--points", type=int, default=20)
    sim.add_argument("--times", help="explicit hold times, comma separated")
    sim.add_argument("--flight-times", default="0,2ms,4ms,6ms,8ms,10ms")
    sim.add_argument("--losses", help="comma list of channels, or 'none'")
    sim.add_argument("--tau-bg", default="115", dest="tau_bg")
    sim.add_argument("--chi", default=LossConfig.chi, type=float)
    sim.add_argument("--Bx", help="axial bias override")
    sim.add_argument("--workers", type=int, default=1)
    sim.set_defaults(func=cmd_simulate)

    ft = sub.add_parser("fit", help="fit decay/TOF data or infer pressure")
    ft.add_argument("fit_command", choices=["biexp", "tof", "expdecay", "pressure"])
    ft.add_argument("--input", help="CSV input (decay or TOF output format)")
    ft.add_argument("--axis", default="z", choices=["x", "y", "z"])
    ft.add_argument("--column", default="T_kinetic_K")
    ft.add_argument("--tau", type=float, help="lifetime in s (pressure)")
    ft.add_argument("--sigma", default="100A2", help="cross-section (pressure)")
    ft.add_argument("--gas", default="He")
    ft.add_argument("--T", default=4.2, type=float, help="gas temperature (pressure)")
    ft.set_defaults(func=cmd_fit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SingularityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except (NoTrapError, UnphysicalTrapError, SaddlePointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_TRAP
    except FitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except ChiptrapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
