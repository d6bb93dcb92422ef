"""Experimental timing: piecewise-linear channel ramps and trap snapshots.

Seven control channels drive the chip: quadrupole-coil current I_Q,
U-wire current I_U, Z-wire current I_Z, bias fields B_z and B_x, the
trapping-beam detuning delta (in linewidth units) and beam power P.
``lasers_on`` is derived as P > 0.  Channels not ramped in a stage hold
their previous value; step ramps jump at the stage start.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NoTrapError
from .geometry import ChipAssembly, build_default_chip, parse_quantity
from .trapanalysis import (
    QuadrupoleReport,
    SpinState,
    TrapReport,
    RB87_F2_M2,
    characterize,
    quadrupole_report,
)

CHANNELS = ("I_Q", "I_U", "I_Z", "B_z", "B_x", "delta", "P")

_STEP_MAX_DURATION = 1e-3


@dataclass(frozen=True)
class Ramp:
    start: float
    end: float
    shape: str = "linear"  # or "step"

    def __post_init__(self):
        if self.shape not in ("linear", "step"):
            raise ConfigurationError(f"unknown ramp shape {self.shape!r}")


@dataclass(frozen=True)
class Stage:
    name: str
    duration: float
    ramps: dict[str, Ramp] = field(default_factory=dict)

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigurationError(f"stage {self.name!r}: duration must be > 0")
        for ch, r in self.ramps.items():
            if ch not in CHANNELS:
                raise ConfigurationError(f"stage {self.name!r}: unknown channel {ch!r}")
            if r.shape == "step" and self.duration > _STEP_MAX_DURATION:
                raise ConfigurationError(
                    f"stage {self.name!r}: step ramps only for durations <= 1 ms")


@dataclass(frozen=True)
class SequenceSpec:
    stages: tuple[Stage, ...]
    initial: dict[str, float]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        init = {ch: 0.0 for ch in CHANNELS}
        init.update(self.initial)
        unknown = set(init) - set(CHANNELS)
        if unknown:
            raise ConfigurationError(f"unknown channel(s) {sorted(unknown)}")
        object.__setattr__(self, "initial", init)
        # continuity across boundaries except across step ramps
        values = dict(init)
        for st in self.stages:
            for ch, r in st.ramps.items():
                if r.shape == "linear" and abs(r.start - values[ch]) > 1e-12 * max(
                        1.0, abs(r.start), abs(values[ch])):
                    raise ConfigurationError(
                        f"stage {st.name!r}: linear ramp of {ch} starts at "
                        f"{r.start} but the channel carries {values[ch]}")
            for ch, r in st.ramps.items():
                values[ch] = r.end

    @property
    def total_duration(self) -> float:
        return sum(st.duration for st in self.stages)

    def stage_start_times(self) -> list[float]:
        t, out = 0.0, []
        for st in self.stages:
            out.append(t)
            t += st.duration
        return out

    def stage_named(self, name: str) -> tuple[Stage, float]:
        for st, t0 in zip(self.stages, self.stage_start_times()):
            if st.name == name:
                return st, t0
        raise KeyError(name)


def default_sequence(bx: float = 2.75e-4, hold: float = 0.05) -> SequenceSpec:
    """The five-stage experimental sequence.

    Loading (5 s), transfer to the on-chip mirror-MOT (20 ms), compression
    (20 ms), magnetic-trap load (100 us; lasers cut as a step, wire
    currents ramped over the stage) and a magnetic hold (>= 50 ms).
    ``bx`` is the axial bias switched on at trap load.
    """
    if hold < 0.05:
        raise ConfigurationError("magnetic hold must be at least 50 ms")
    g = 1e-4  # Gauss
    initial = {"I_Q": 1.77, "I_U": 0.0, "I_Z": 0.0,
               "B_z": 3.1 * g, "B_x": 0.0, "delta": -2.7, "P": 8.5e-3}
    stages = (
        Stage("mot_loading", 5.0),
        Stage("transfer", 20e-3, {
            "I_Q": Ramp(1.77, 0.0),
            "I_U": Ramp(0.0, 3.0),
            "B_z": Ramp(3.1 * g, 0.52 * g),
        }),
        Stage("compression", 20e-3, {
            "I_U": Ramp(3.0, 1.8),
            "B_z": Ramp(0.52 * g, 6.26 * g),
            "delta": Ramp(-2.7, -10.2),
            "P": Ramp(8.5e-3, 6e-3),
        }),
        Stage("trap_load", 100e-6, {
            "P": Ramp(6e-3, 0.0, "step"),
            "I_U": Ramp(1.8, 0.0),
            "I_Z": Ramp(0.0, 1.5),
            "B_x": Ramp(0.0, bx, "step"),
        }),
        Stage("magnetic_hold", hold),
    )
    return SequenceSpec(stages, initial)


def value_at(seq: SequenceSpec, channel: str, t: float) -> float:
    """Channel value at time t; piecewise linear, steps jump at stage start."""
    if channel not in CHANNELS:
        raise ConfigurationError(f"unknown channel {channel!r}")
    total = seq.total_duration
    if t < 0.0 or t > total:
        raise ValueError(f"t={t} outside the sequence range [0, {total}]")
    values = dict(seq.initial)
    t0 = 0.0
    for st in seq.stages:
        t1 = t0 + st.duration
        in_stage = t0 <= t < t1 or (t == total and t1 == total)
        if in_stage:
            r = st.ramps.get(channel)
            if r is None:
                return values[channel]
            if r.shape == "step":
                return r.end
            frac = (t - t0) / st.duration
            return r.start + (r.end - r.start) * frac
        for ch, r in st.ramps.items():
            values[ch] = r.end
        t0 = t1
    return values[channel]


def values_at(seq: SequenceSpec, t: float) -> dict[str, float]:
    return {ch: value_at(seq, ch, t) for ch in CHANNELS}


def lasers_on(seq: SequenceSpec, t: float) -> bool:
    return value_at(seq, "P", t) > 0.0


@dataclass(frozen=True)
class SequenceLimits:
    """Hardware limits from the chip's measured critical currents."""

    i_u_max: float = 5.0
    i_z_max_lasers_on: float = 1.71
    i_z_max_lasers_off: float = 1.94
    delta_abs_max: float = 50.0


@dataclass(frozen=True)
class Violation:
    t: float
    channel: str
    limit: float
    value: float
    reason: str

    def format(self) -> str:
        return f"t={self.t:g} channel={self.channel} limit={self.limit:g}"


def validate(seq: SequenceSpec, limits: SequenceLimits = SequenceLimits()) -> list[Violation]:
    """Check every ramp endpoint against the hardware limits.

    Channels are piecewise linear, so extrema occur at stage boundaries;
    each stage is probed at its start and end instants.
    """
    out: list[Violation] = []
    t0 = 0.0
    probes: list[float] = [0.0]
    for st in seq.stages:
        probes.append(t0)                       # post-step stage entry
        probes.append(t0 + st.duration / 2)     # interior (redundant but cheap)
        t0 += st.duration
        probes.append(min(t0, seq.total_duration))
    seen = set()
    for t in probes:
        if t in seen:
            continue
        seen.add(t)
        v = values_at(seq, t)
        on = v["P"] > 0.0
        if v["I_U"] > limits.i_u_max:
            out.append(Violation(t, "I_U", limits.i_u_max, v["I_U"],
                                 "U-wire critical current"))
        iz_limit = limits.i_z_max_lasers_on if on else limits.i_z_max_lasers_off
        reason = ("Z-wire critical current (lasers on)" if on
                  else "Z-wire critical current (lasers off)")
        if v["I_Z"] > iz_limit:
            out.append(Violation(t, "I_Z", iz_limit, v["I_Z"], reason))
        if v["P"] < 0.0:
            out.append(Violation(t, "P", 0.0, v["P"], "negative beam power"))
        if abs(v["delta"]) > limits.delta_abs_max:
            out.append(Violation(t, "delta", limits.delta_abs_max, v["delta"],
                                 "detuning sanity bound"))
    out.sort(key=lambda v: (v.t, v.channel))
    return out


def chip_at(seq: SequenceSpec, t: float,
            overrides: dict[str, float] | None = None) -> ChipAssembly:
    """Instantiate the chip with the channel values at time t."""
    v = values_at(seq, t)
    params = {"coil_current": v["I_Q"], "u_current": v["I_U"],
              "z_current": v["I_Z"], "bias_z": v["B_z"], "bias_x": v["B_x"]}
    if overrides:
        params.update(overrides)
    return build_default_chip(params)


@dataclass(frozen=True)
class Snapshot:
    t: float
    kind: str  # "quadrupole" during laser stages, "ioffe" after trap load
    report: TrapReport | QuadrupoleReport

    @property
    def distance_to_chip(self) -> float:
        return self.report.distance_to_chip


def snapshots(seq: SequenceSpec, times, spin: SpinState = RB87_F2_M2,
              seed=(0.0, 2e-3, 0.0),
              chip_overrides: dict[str, float] | None = None) -> list[Snapshot]:
    """Trap/quadrupole reports along the sequence.

    Laser-on stages are characterized by their field zero, the magnetic
    stage by the full Ioffe report.  The previous snapshot position seeds
    the next search.
    """
    out = []
    guess = np.asarray(seed, dtype=float)
    for t in times:
        chip = chip_at(seq, t, chip_overrides)
        try:
            if lasers_on(seq, t):
                rep = quadrupole_report(chip, guess)
                guess = rep.zero_position
                out.append(Snapshot(t, "quadrupole", rep))
            else:
                rep = characterize(chip, spin, guess)
                guess = rep.position
                out.append(Snapshot(t, "ioffe", rep))
        except NoTrapError as exc:
            raise NoTrapError(f"t={t:g} s: {exc}") from exc
    return out


def adiabaticity_metric(seq: SequenceSpec, spin: SpinState, t: float,
                        chip_overrides: dict[str, float] | None = None) -> float:
    """max_i |d(omega_i)/dt| / omega_i^2 estimated over t +- duration/100.

    Zero for a static trap; >> 1 flags a sudden (non-adiabatic) ramp.
    """
    st = None
    t0 = 0.0
    for s in seq.stages:
        if t0 <= t < t0 + s.duration or t == seq.total_duration:
            st = s
            break
        t0 += s.duration
    if st is None:
        raise ValueError(f"t={t} outside the sequence")
    dt = st.duration / 100.0
    if t - dt < 0 or t + dt > seq.total_duration:
        raise ValueError("t +- duration/100 leaves the sequence range")

    guess = np.array([0.0, 1e-3, 0.0])
    omegas = []
    for ti in (t - dt, t, t + dt):
        rep = characterize(chip_at(seq, ti, chip_overrides), spin, guess)
        guess = rep.position
        omegas.append(2 * np.pi * np.sort(rep.frequencies))
    w_m, w_0, w_p = omegas
    return float(np.max(np.abs(w_p - w_m) / (2 * dt * w_0**2)))


# ---------------------------------------------------------------------------
# sequence file I/O

_CHANNEL_UNIT_HINTS = {"I_Q": "A", "I_U": "A", "I_Z": "A",
                       "B_z": "T", "B_x": "T", "delta": "Gamma", "P": "W"}


def _split_unit(text: str) -> tuple[str, str]:
    """Split '0.52 Gauss' into ('0.52', 'Gauss'); unit may be empty."""
    s = text.strip()
    head = s.rstrip("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZµ/ ")
    return head.strip(), s[len(head):].strip()


def _parse_ramp(text: str) -> Ramp | float:
    """Parse 'value [unit]' or 'a -> b [unit] [shape]' into a Ramp or constant.

    The unit tag on the right-hand side of a ramp applies to both endpoints.
    """
    s = text.strip()
    shape = "linear"
    for tag in ("linear", "step"):
        if s.endswith(tag):
            s = s[: -len(tag)].strip()
            shape = tag
    if "->" not in s:
        if shape == "step":
            raise ConfigurationError(f"step ramp needs 'a -> b': {text!r}")
        return parse_quantity(s)
    left, right = (part.strip() for part in s.split("->", 1))
    _, unit = _split_unit(right)
    end = parse_quantity(right)
    _, left_unit = _split_unit(left)
    start = parse_quantity(left if left_unit else f"{left} {unit}".strip())
    return Ramp(start, end, shape)


def load_sequence_file(path: str) -> SequenceSpec:
    """Load a sequence file: an [initial] section then [stage:<name>] sections."""
    cp = configparser.ConfigParser()
    cp.optionxform = str  # channel names are case-sensitive
    try:
        with open(path) as fh:
            cp.read_file(fh, source=path)
    except OSError as exc:
        raise ConfigurationError(f"cannot read sequence file: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed sequence file: {exc}") from exc

    initial: dict[str, float] = {}
    stages: list[Stage] = []
    for section in cp.sections():
        if section == "initial":
            for ch, raw in cp.items(section):
                if ch not in CHANNELS:
                    raise ConfigurationError(f"unknown channel {ch!r} in [initial]")
                v = _parse_ramp(raw)
                if isinstance(v, Ramp):
                    raise ConfigurationError("[initial] entries must be constants")
                initial[ch] = v
        elif section.startswith("stage:"):
            name = section.split(":", 1)[1]
            duration = None
            ramps: dict[str, Ramp] = {}
            for key, raw in cp.items(section):
                if key == "duration":
                    duration = parse_quantity(raw)
                    continue
                if key not in CHANNELS:
                    raise ConfigurationError(
                        f"unknown channel {key!r} in [stage:{name}]")
                v = _parse_ramp(raw)
                ramps[key] = v if isinstance(v, Ramp) else Ramp(v, v)
            if duration is None:
                raise ConfigurationError(f"[stage:{name}] is missing a duration")
            stages.append(Stage(name, duration, ramps))
        else:
            raise ConfigurationError(f"unknown section [{section}] in {path}")
    if not stages:
        raise ConfigurationError(f"no stages defined in {path}")
    return SequenceSpec(tuple(stages), initial)
