"""Acceptance criteria, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to get one line per
criterion.  Every tolerance is fixed here, not calibrated at runtime.
"""

import numpy as np
import pytest

from chiptrap.analysis import (
    PressureQuery,
    fit_biexponential,
    fit_exponential_decay,
    fit_tof,
    infer_lifetime,
    infer_pressure,
)
from chiptrap.cli import main as cli_main
from chiptrap.constants import MU0
from chiptrap.ensemble import CloudSpec, LossConfig, evolve, sample_cloud, time_of_flight
from chiptrap.fieldsolver import field_jacobian, field_of_table, segment_field, source_table
from chiptrap.geometry import (
    ChipAssembly,
    PolylineConductor,
    WireSegment,
    build_default_chip,
)
from chiptrap.sequence import default_sequence, snapshots
from chiptrap.trapanalysis import RB87_F2_M2, characterize


def _report(n, text):
    print(f"\n[criterion {n}] PASS: {text}")


@pytest.fixture(scope="module")
def reference_trap():
    return characterize(build_default_chip(), RB87_F2_M2, (0, 1e-3, 0))


def test_criterion_01_field_solver_exactness():
    # finite segment against the infinite-wire limit at d/L = 5e-4
    seg = WireSegment((-0.5, 0, 0), (0.5, 0, 0), 1.5)
    d = 5e-4
    B = np.linalg.norm(segment_field(seg, (0, d, 0)))
    expected = MU0 * 1.5 / (2 * np.pi * d)
    err_wire = abs(B - expected) / expected
    assert err_wire < 1e-6

    # square-loop center against the analytic value
    a = 10e-3
    loop = PolylineConductor(
        vertices=[(-a / 2, 0, -a / 2), (a / 2, 0, -a / 2), (a / 2, 0, a / 2),
                  (-a / 2, 0, a / 2), (-a / 2, 0, -a / 2)], current=1.0)
    Bloop = np.linalg.norm(field_of_table(
        source_table(ChipAssembly(conductors=(loop,), biases=())), [[0, 0, 0]])[0])
    analytic = 2 * np.sqrt(2) * MU0 / (np.pi * a)
    err_loop = abs(Bloop - analytic) / analytic
    assert err_loop < 1e-9

    # Maxwell residuals at 100 random points.  div B = 0 holds for every
    # source; curl B = 0 holds for conserved (closed) currents, so the curl
    # check runs on the coil plus a closed loop (open polylines carry a
    # non-solenoidal filament field by construction).
    rng = np.random.default_rng(2024)
    pts = np.column_stack([rng.uniform(-5e-3, 5e-3, 100),
                           rng.uniform(1.5e-3, 5e-3, 100),
                           rng.uniform(-5e-3, 5e-3, 100)])
    table_div = source_table(build_default_chip({"u_current": 1.0,
                                                 "coil_current": 1.0}))
    closed = ChipAssembly(conductors=(loop,),
                          coils=build_default_chip({"coil_current": 1.77}).coils,
                          biases=build_default_chip().biases)
    table_curl = source_table(closed)
    worst_div = worst_curl = 0.0
    for p in pts:
        J = field_jacobian(table_div, p, h=1e-6)
        worst_div = max(worst_div, abs(np.trace(J)) / np.max(np.abs(J)))
        J = field_jacobian(table_curl, p, h=1e-6)
        curl = np.array([J[2, 1] - J[1, 2], J[0, 2] - J[2, 0], J[1, 0] - J[0, 1]])
        worst_curl = max(worst_curl, np.max(np.abs(curl)) / np.max(np.abs(J)))
    assert worst_div < 1e-6
    assert worst_curl < 1e-6
    _report(1, f"wire limit err {err_wire:.2e}, loop err {err_loop:.2e}, "
               f"max div {worst_div:.2e}, max curl {worst_curl:.2e}")


def test_criterion_02_trap_distance(reference_trap):
    d_um = reference_trap.distance_to_chip * 1e6
    assert 440 * 0.85 <= d_um <= 440 * 1.15

    distances = []
    for scale in (0.8, 0.9, 1.0, 1.1, 1.2):
        rep = characterize(build_default_chip({"bias_z": 6.26e-4 * scale}),
                           RB87_F2_M2, (0, 1e-3, 0))
        distances.append(rep.distance_to_chip)
    assert np.all(np.diff(distances) < 0)
    _report(2, f"distance {d_um:.1f} um (440 +- 15%); distance falls "
               f"monotonically over the +-20% B_z sweep")


def test_criterion_03_compression():
    seq = default_sequence()
    t0, t1 = 5.02, 5.04  # compression stage
    times = list(np.linspace(t0 + 1e-4, t1 - 1e-6, 6))
    snaps = snapshots(seq, times, seed=(0, 3e-3, 0))
    dists = [s.distance_to_chip for s in snaps]
    assert all(a >= b for a, b in zip(dists, dists[1:]))
    g0 = np.linalg.norm(snaps[0].report.gradient)
    g1 = np.linalg.norm(snaps[-1].report.gradient)
    assert g1 / g0 >= 20.0
    _report(3, f"gradient ratio {g1 / g0:.1f} (>= 20); distance "
               f"{dists[0] * 1e3:.2f} -> {dists[-1] * 1e3:.2f} mm monotone")


def test_criterion_04_ioffe_anisotropy(reference_trap):
    f = np.sort(reference_trap.frequencies)
    ratio = f[2] / f[0]
    assert ratio >= 5.0
    # the Fig.-4 images (B_x = 0) show aspect ~9.6; record that ratio too
    rep0 = characterize(build_default_chip({"bias_x": 0.0}), RB87_F2_M2,
                        (0, 1e-3, 0))
    f0 = np.sort(rep0.frequencies)
    _report(4, f"freqs {f.round(1).tolist()} Hz, steep/axial ratio "
               f"{ratio:.2f} (>= 5); at B_x=0: {(f0[2] / f0[0]):.2f} "
               f"(observed cloud aspect ~9.6)")


def test_criterion_05_majorana_proxy(reference_trap):
    losses = LossConfig(background=False)  # surface, spin-flip, escape only
    spec = CloudSpec(n=5000, temperature=40e-6, center=tuple(reference_trap.position))
    flips = {}
    for bx in (0.0, 2.75e-4):
        chip = build_default_chip({"bias_x": bx})
        ens = sample_cloud(spec, 777)  # identical ensembles either way
        res = evolve(chip, ens, dt=9e-5, t_end=10.0, losses=losses, workers=2)
        flips[bx] = int(res.counts["spin_flip"][-1])
    assert flips[0.0] >= 5 * max(flips[2.75e-4], 1)
    assert flips[0.0] > 100

    b0s = [characterize(build_default_chip({"bias_x": bx}), RB87_F2_M2,
                        (0, 1e-3, 0)).b0
           for bx in (0.0, 1e-4, 2e-4, 2.75e-4, 4e-4)]
    assert np.all(np.diff(b0s) > 0)
    _report(5, f"spin flips {flips[0.0]} at B_x=0 vs {flips[2.75e-4]} at "
               f"2.75 G (>= 5x); B0 strictly increasing over the B_x sweep")


def test_criterion_06_pressure_inference():
    out = infer_pressure(PressureQuery(tau=115.0))
    p_mbar = out["pressure_mbar"]
    assert 2e-11 <= p_mbar <= 4.5e-11
    tau_back = infer_lifetime(out["pressure_Pa"])
    assert abs(tau_back - 115.0) / 115.0 < 1e-12
    _report(6, f"P = {p_mbar:.2e} mbar in [2e-11, 4.5e-11]; "
               f"lifetime round trip exact to 1e-12")


def test_criterion_07_fit_recovery(reference_trap):
    # bi-exponential: the 10% bound is the typical (median) recovery over
    # seeds; the per-seed scatter of tau2 at this noise level is ~6%
    t = np.linspace(0.0, 60.0, 40)
    model = 0.75 * np.exp(-t / 5.7) + 0.25 * np.exp(-t / 115.0)
    e1, e2 = [], []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        y = np.clip(model * (1 + 0.02 * rng.standard_normal(40)), 1e-9, None)
        fit = fit_biexponential(t, y)
        assert fit.converged
        e1.append(abs(fit.parameters["tau1"] - 5.7) / 5.7)
        e2.append(abs(fit.parameters["tau2"] - 115.0) / 115.0)
    assert np.median(e1) <= 0.10
    assert np.median(e2) <= 0.10

    # TOF thermometry from ensemble-generated data
    spec = CloudSpec(n=100_000, temperature=40e-6,
                     center=tuple(reference_trap.position))
    ens = sample_cloud(spec, 4321)
    times = np.array([0.0, 2e-3, 4e-3, 6e-3, 8e-3, 10e-3])
    widths = np.array([time_of_flight(ens, float(tf)).widths[2] for tf in times])
    fit = fit_tof(times, widths)
    err_T = abs(fit.parameters["T"] - 40e-6) / 40e-6
    assert err_T <= 0.05
    _report(7, f"biexp median recovery tau1 {np.median(e1) * 100:.1f}%, "
               f"tau2 {np.median(e2) * 100:.1f}% (<= 10%); TOF temperature "
               f"err {err_T * 100:.2f}% (<= 5%)")


def test_criterion_08_decay_morphology(reference_trap):
    from chiptrap.constants import K_B, M_RB87

    chip = build_default_chip()
    # a 40 uK cloud in trap equilibrium (sigma_i = v_th / omega_i); the
    # MOT-shaped default cloud would add virial sloshing on top of the
    # truncation loss without changing the morphology
    vth = np.sqrt(K_B * 40e-6 / M_RB87)
    om = 2 * np.pi * np.sort(reference_trap.frequencies)
    spec = CloudSpec(n=2500, temperature=40e-6, center=tuple(reference_trap.position),
                     sigmas=(vth / om[0], vth / om[2], vth / om[1]))
    losses = LossConfig(tau_background=115.0)
    times = np.array([0.05, 0.3, 0.7, 1.2, 2.0, 3.0, 4.5, 6.0, 8.0, 10.0,
                      13.0, 16.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0])
    ens = sample_cloud(spec, 20614)
    res = evolve(chip, ens, dt=1.6e-4, t_end=50.0, losses=losses,
                 record_times=times, workers=2)

    # log-convex (fast-then-slow): the early log-slope is much steeper
    alive = res.alive.astype(float)
    logn = np.log(alive)
    early = -(logn[3] - logn[0]) / (res.times[3] - res.times[0])
    late = -(logn[-1] - logn[-6]) / (res.times[-1] - res.times[-6])
    assert early > 3 * late
    assert late > 0

    # slow constant of the hold decay: Poisson (1/N) weights, prompt
    # sub-second projection transient excluded (the measured curve starts
    # after a 50 ms minimum hold and cannot resolve it either)
    m = res.times >= 1.0
    fit = fit_biexponential(res.times[m], alive[m], weights=1.0 / alive[m])
    tau2 = fit.parameters["tau2"]
    assert abs(tau2 - 115.0) / 115.0 <= 0.20

    # kinetic temperature decreases from 40 uK over the first 10 s
    first_10 = res.times <= 10.0
    T = res.temperature[first_10]
    assert T[0] <= 40e-6 * 1.05
    assert T[-1] < T[0]
    tfit = fit_exponential_decay(res.times[first_10], T)
    _report(8, f"log-slopes early {early:.3f}/s vs late {late:.5f}/s; "
               f"tau2 {tau2:.0f} s (115 +- 20%), evaporation-like tau1 "
               f"{fit.parameters['tau1']:.1f} s (recorded); T "
               f"{T[0] * 1e6:.1f} -> {T[-1] * 1e6:.1f} uK, fitted tau "
               f"{tfit.parameters['tau']:.1f} s (emergent, not pinned)")


def test_criterion_09_determinism(tmp_path):
    argv = ["simulate", "decay", "--seed", "2718", "--n", "600",
            "--t-end", "1.5", "--points", "4", "--temperature", "40uK"]
    outs = []
    for run, workers in (("a", "1"), ("b", "2"), ("c", "1")):
        out = tmp_path / run
        rc = cli_main(argv + ["--workers", workers, "--out", str(out)])
        assert rc == 0
        outs.append((out / "decay.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]
    _report(9, "decay CSV byte-identical for workers=1,2 and across reruns")


def test_criterion_10_desk_scale_exclusions(reference_trap):
    """Absolute atom numbers and the measured tau1 are out of scope.

    The measured 8.2e5 trapped atoms, the 7% MOT->trap transfer efficiency
    and tau1 = 5.7(9) s depend on collision and sublevel physics this
    model does not contain; the simulated capture fraction is reported,
    never asserted.  Criteria 5 and 8 cover the corresponding physics
    qualitatively.
    """
    chip = build_default_chip()
    spec = CloudSpec(n=1000, temperature=40e-6, center=tuple(reference_trap.position))
    ens = sample_cloud(spec, 99)
    res = evolve(chip, ens, dt=1.5e-4, t_end=1.0,
                 losses=LossConfig(background=False), record_times=[1.0])
    capture = res.alive[-1] / spec.n
    assert 0.0 < capture < 1.0  # reported, not pinned to the measured 7%
    _report(10, f"capture fraction {capture:.2f} reported only; absolute "
                f"numbers (8.2e5, 7%, tau1=5.7 s) excluded by design")
