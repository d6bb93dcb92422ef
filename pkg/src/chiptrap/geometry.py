"""Chip geometry: conductors, coils, biases, units and the default chip.

Coordinate convention (all SI): the chip surface is the plane y = 0 with
vacuum at y > 0; the central bars of the trapping wires run along x; z is
vertical with gravity pointing along -z.  Conductors are zero-width
filaments (wire widths are kept as metadata only); bias coils are ideal
uniform fields.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

import numpy as np

from .constants import G_EARTH
from .errors import ConfigurationError

Vec3 = np.ndarray

#: filament exclusion radius: field queries closer than this are errors
EPS_WIRE = 1e-6

_UNIT_FACTORS = {
    "Gauss": 1e-4,
    "Gauss/cm": 1e-2,
    "mm": 1e-3,
    "µm": 1e-6,
    "um": 1e-6,
    "µK": 1e-6,
    "uK": 1e-6,
    "mW": 1e-3,
    "A": 1.0,
    "s": 1.0,
    "ms": 1e-3,
    "µs": 1e-6,
    "us": 1e-6,
}


def convert_units(value: float, unit: str) -> float:
    """Convert a value tagged with one of the supported units to SI."""
    try:
        factor = _UNIT_FACTORS[unit]
    except KeyError:
        raise ConfigurationError(
            f"unknown unit {unit!r}; supported: {sorted(_UNIT_FACTORS)}"
        ) from None
    return value * factor


def parse_quantity(text: str, extra_units: dict[str, float] | None = None) -> float:
    """Parse '6.26 Gauss', '2mm' or a bare SI number into an SI float."""
    s = str(text).strip()
    units = dict(_UNIT_FACTORS)
    if extra_units:
        units.update(extra_units)
    # longest tags first so 'ms' wins over 's', 'Gauss/cm' over 'Gauss'
    for tag in sorted(units, key=len, reverse=True):
        if s.endswith(tag):
            head = s[: -len(tag)].strip()
            if head:
                try:
                    return float(head) * units[tag]
                except ValueError:
                    break
    try:
        return float(s)
    except ValueError:
        raise ConfigurationError(f"cannot parse quantity {text!r}") from None


def as_vec3(v) -> Vec3:
    a = np.asarray(v, dtype=float)
    if a.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("vector components must be finite")
    return a


def _frozen_array(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class WireSegment:
    """Straight filament from start to end carrying a signed current."""

    start: Vec3
    end: Vec3
    current: float
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "start", _frozen_array(as_vec3(self.start)))
        object.__setattr__(self, "end", _frozen_array(as_vec3(self.end)))
        if np.allclose(self.start, self.end):
            raise ValueError("segment endpoints coincide")
        if not np.isfinite(self.current):
            raise ValueError("current must be finite")


@dataclass(frozen=True)
class PolylineConductor:
    """Open polyline of straight filament segments with one common current."""

    vertices: np.ndarray  # (n, 3), n >= 2
    current: float
    label: str = ""
    width: float | None = None  # physical wire width, metadata only

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] < 2:
            raise ValueError("vertices must be an (n>=2, 3) array")
        if np.any(np.all(np.diff(v, axis=0) == 0.0, axis=1)):
            raise ValueError("consecutive vertices must be distinct")
        object.__setattr__(self, "vertices", _frozen_array(v))

    def segments(self) -> list[WireSegment]:
        v = self.vertices
        return [
            WireSegment(v[i], v[i + 1], self.current, self.label)
            for i in range(len(v) - 1)
        ]

    def arc_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.vertices, axis=0), axis=1)))


@dataclass(frozen=True)
class RectangularCoil:
    """Planar rectangular coil; turns stack along the normal.

    ``axis_u``/``axis_v`` are orthonormal in-plane directions for the
    ``side_u`` x ``side_v`` rectangle; turn i is offset by
    i * turn_spacing along ``stack_dir``.
    """

    center: Vec3
    axis_u: Vec3
    axis_v: Vec3
    side_u: float
    side_v: float
    turns: int
    current: float
    turn_spacing: float = 1e-4
    stack_dir: Vec3 = (0.0, -1.0, 0.0)
    label: str = "coil"

    def __post_init__(self):
        for name in ("center", "axis_u", "axis_v", "stack_dir"):
            object.__setattr__(self, name, _frozen_array(as_vec3(getattr(self, name))))
        if self.side_u <= 0 or self.side_v <= 0:
            raise ValueError("coil sides must be positive")
        if self.turns < 1:
            raise ValueError("coil needs at least one turn")
        if abs(np.dot(self.axis_u, self.axis_v)) > 1e-12 or not (
            np.isclose(np.linalg.norm(self.axis_u), 1.0)
            and np.isclose(np.linalg.norm(self.axis_v), 1.0)
        ):
            raise ValueError("coil in-plane axes must be orthonormal")


def discretize_coil(coil: RectangularCoil) -> list[WireSegment]:
    """Expand a coil into 4 straight segments per turn.

    The traversal order is u+ corner -> u- along -u (the "bottom" edge at
    v = -side_v/2), then +v, +u, -v; total signed circulation is
    turns * current.
    """
    hu = 0.5 * coil.side_u * coil.axis_u
    hv = 0.5 * coil.side_v * coil.axis_v
    corners = [+hu - hv, -hu - hv, -hu + hv, +hu + hv]
    segs = []
    for i in range(coil.turns):
        c = coil.center + i * coil.turn_spacing * coil.stack_dir
        pts = [c + d for d in corners]
        for a, b in zip(pts, pts[1:] + pts[:1]):
            segs.append(WireSegment(a, b, coil.current, coil.label))
    return segs


@dataclass(frozen=True)
class UniformBias:
    """Spatially uniform applied field, Tesla."""

    vector: Vec3
    label: str = "bias"

    def __post_init__(self):
        object.__setattr__(self, "vector", _frozen_array(as_vec3(self.vector)))


@dataclass(frozen=True)
class ChipAssembly:
    """Full field source model: wires, coils, uniform biases, gravity."""

    conductors: tuple[PolylineConductor, ...] = ()
    coils: tuple[RectangularCoil, ...] = ()
    biases: tuple[UniformBias, ...] = ()
    gravity: Vec3 = (0.0, 0.0, -G_EARTH)

    def __post_init__(self):
        object.__setattr__(self, "conductors", tuple(self.conductors))
        object.__setattr__(self, "coils", tuple(self.coils))
        object.__setattr__(self, "biases", tuple(self.biases))
        object.__setattr__(self, "gravity", _frozen_array(as_vec3(self.gravity)))
        for c in self.conductors:
            if np.any(c.vertices[:, 1] > 1e-12):
                raise ConfigurationError(
                    f"conductor {c.label!r} has vertices in front of the chip plane"
                )

    def all_segments(self, skip_zero_current: bool = False) -> list[WireSegment]:
        segs: list[WireSegment] = []
        for c in self.conductors:
            if skip_zero_current and c.current == 0.0:
                continue
            segs.extend(c.segments())
        for coil in self.coils:
            if skip_zero_current and coil.current == 0.0:
                continue
            segs.extend(discretize_coil(coil))
        return segs

    def bias_total(self) -> Vec3:
        total = np.zeros(3)
        for b in self.biases:
            total = total + b.vector
        return total


# Default chip parameters, SI.  The Z/U arm lengths and the coil
# registration are assumptions calibrated so that the Z trap sits ~440 um
# from the surface; they are not measured values.
DEFAULT_PARAMETERS: dict[str, float] = {
    "z_bar_length": 2.0e-3,
    "z_arm_length": 10.0e-3,
    "z_current": 1.5,
    "z_wire_width": 40e-6,
    "u_bar_length": 5.0e-3,
    "u_arm_length": 10.0e-3,
    "u_current": 0.0,
    "u_wire_width": 280e-6,
    "coil_width": 10.0e-3,
    "coil_length": 28.0e-3,
    "coil_turns": 19,
    "coil_standoff": 1.5e-3,
    "coil_turn_spacing": 1.0e-4,
    "coil_current": 0.0,
    "coil_z_offset": 0.0,
    "bias_z": 6.26e-4,
    "bias_x": 2.75e-4,
    "gravity_z": -G_EARTH,
}


def build_default_chip(overrides: dict[str, float] | None = None) -> ChipAssembly:
    """Build the default chip assembly, optionally overriding parameters.

    Wire layout (positive current):

    * Z-wire: enters at (+bar/2, 0, +arm), runs down to the bar, crosses
      along -x, exits along -z.  The parallel arm currents give the trap a
      nonzero axial field along +x, so a +x bias deepens the bottom field.
    * U-wire: both arms extend along -z from the bar ends; arm currents
      are antiparallel, giving a field zero (quadrupole) with a +z bias.
    * Quadrupole coil: plane parallel to the chip at y = -standoff, long
      axis along z, bottom edge centered behind the wire pattern; the
      bottom edge carries current along -x, mimicking the U bar.
    """
    params = dict(DEFAULT_PARAMETERS)
    if overrides:
        unknown = set(overrides) - set(params)
        if unknown:
            raise ConfigurationError(
                f"unknown chip parameter(s): {sorted(unknown)}; "
                f"see chip.schema for the documented names"
            )
        params.update(overrides)

    zb, za = params["z_bar_length"] / 2.0, params["z_arm_length"]
    z_wire = PolylineConductor(
        vertices=[(+zb, 0.0, +za), (+zb, 0.0, 0.0), (-zb, 0.0, 0.0), (-zb, 0.0, -za)],
        current=params["z_current"],
        label="Z-wire",
        width=params["z_wire_width"],
    )
    ub, ua = params["u_bar_length"] / 2.0, params["u_arm_length"]
    u_wire = PolylineConductor(
        vertices=[(+ub, 0.0, -ua), (+ub, 0.0, 0.0), (-ub, 0.0, 0.0), (-ub, 0.0, -ua)],
        current=params["u_current"],
        label="U-wire",
        width=params["u_wire_width"],
    )
    coil = RectangularCoil(
        center=(
            0.0,
            -params["coil_standoff"],
            params["coil_z_offset"] + params["coil_length"] / 2.0,
        ),
        axis_u=(1.0, 0.0, 0.0),
        axis_v=(0.0, 0.0, 1.0),
        side_u=params["coil_width"],
        side_v=params["coil_length"],
        turns=int(params["coil_turns"]),
        current=params["coil_current"],
        turn_spacing=params["coil_turn_spacing"],
        stack_dir=(0.0, -1.0, 0.0),
        label="quadrupole-coil",
    )
    biases = (
        UniformBias((0.0, 0.0, params["bias_z"]), label="B_z"),
        UniformBias((params["bias_x"], 0.0, 0.0), label="B_x"),
    )
    return ChipAssembly(
        conductors=(z_wire, u_wire),
        coils=(coil,),
        biases=biases,
        gravity=(0.0, 0.0, params["gravity_z"]),
    )


# chip file sections -> parameter-name prefixes
_CHIP_FILE_KEYS = {
    "z_wire": {"bar_length": "z_bar_length", "arm_length": "z_arm_length",
               "current": "z_current", "width": "z_wire_width"},
    "u_wire": {"bar_length": "u_bar_length", "arm_length": "u_arm_length",
               "current": "u_current", "width": "u_wire_width"},
    "coil": {"width": "coil_width", "length": "coil_length", "turns": "coil_turns",
             "standoff": "coil_standoff", "turn_spacing": "coil_turn_spacing",
             "current": "coil_current", "z_offset": "coil_z_offset"},
    "bias": {"bz": "bias_z", "bx": "bias_x"},
    "environment": {"gravity_z": "gravity_z"},
}


def load_chip_file(path: str) -> ChipAssembly:
    """Load a chip configuration file (INI-style; see chip.schema).

    Unknown sections or keys are configuration errors naming the
    offending entry; malformed files report the parser's line numbers.
    """
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh, source=path)
    except OSError as exc:
        raise ConfigurationError(f"cannot read chip file: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed chip file: {exc}") from exc

    overrides: dict[str, float] = {}
    for section in cp.sections():
        if section not in _CHIP_FILE_KEYS:
            raise ConfigurationError(
                f"unknown section [{section}] in chip file {path}"
            )
        table = _CHIP_FILE_KEYS[section]
        for key, raw in cp.items(section):
            if key not in table:
                raise ConfigurationError(
                    f"unknown key {key!r} in section [{section}] of {path}"
                )
            overrides[table[key]] = parse_quantity(raw)
    return build_default_chip(overrides)
