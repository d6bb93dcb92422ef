import numpy as np
import pytest

from chiptrap.constants import MU0
from chiptrap.errors import SingularityError
from chiptrap.fieldsolver import (
    field_hessian_of_magnitude,
    field_jacobian,
    field_map,
    field_of_table,
    segment_field,
    source_table,
    total_field,
    write_field_csv,
)
from chiptrap.geometry import (
    ChipAssembly,
    PolylineConductor,
    UniformBias,
    WireSegment,
    build_default_chip,
)


def infinite_wire_field(current, d):
    return MU0 * current / (2 * np.pi * d)


def long_wire_chip(current=1.5, length=1.0):
    wire = PolylineConductor(
        vertices=[(-length / 2, 0, 0), (length / 2, 0, 0)],
        current=current, label="surrogate",
    )
    return ChipAssembly(conductors=(wire,), biases=())


def test_segment_matches_infinite_wire_limit():
    # 1 m segment, 1.5 A, probed 479.5 um above the midpoint
    d = 479.5e-6
    seg = WireSegment((-0.5, 0, 0), (0.5, 0, 0), 1.5)
    B = segment_field(seg, (0, d, 0))
    expected = infinite_wire_field(1.5, d)
    assert np.linalg.norm(B) == pytest.approx(6.256e-4, rel=1e-3)
    assert np.linalg.norm(B) == pytest.approx(expected, rel=1e-6)
    # direction: current +x, displacement +y -> field along +z
    assert B[2] > 0 and abs(B[0]) < 1e-20 and abs(B[1]) < 1e-20


def test_finite_wire_error_decays_quadratically():
    # relative deviation from the infinite-wire value scales as (d/L)^2
    seg = WireSegment((-0.5, 0, 0), (0.5, 0, 0), 1.0)
    ratios = []
    for d in (4e-3, 2e-3, 1e-3, 5e-4):
        B = np.linalg.norm(segment_field(seg, (0, d, 0)))
        ratios.append(abs(B - infinite_wire_field(1.0, d)) / infinite_wire_field(1.0, d))
    ratios = np.array(ratios)
    orders = np.log2(ratios[:-1] / ratios[1:])
    assert np.all(np.abs(orders - 2.0) < 0.05)
    assert ratios[-1] < 1e-6  # d/L = 5e-4


def test_zero_current_zero_field():
    seg = WireSegment((0, 0, 0), (1, 0, 0), 0.0)
    np.testing.assert_array_equal(segment_field(seg, (0.5, 0.3, 0)), np.zeros(3))


def test_on_axis_extension_is_exactly_zero():
    seg = WireSegment((0, 0, 0), (1, 0, 0), 2.0)
    np.testing.assert_array_equal(segment_field(seg, (2.0, 0, 0)), np.zeros(3))
    np.testing.assert_array_equal(segment_field(seg, (-1.0, 0, 0)), np.zeros(3))


def test_point_on_wire_raises_singularity():
    seg = WireSegment((0, 0, 0), (1, 0, 0), 2.0, label="hot-wire")
    with pytest.raises(SingularityError, match="hot-wire"):
        segment_field(seg, (0.5, 0.5e-6, 0))


def test_square_loop_center_analytic():
    a = 10e-3
    loop = PolylineConductor(
        vertices=[(-a / 2, 0, -a / 2), (a / 2, 0, -a / 2), (a / 2, 0, a / 2),
                  (-a / 2, 0, a / 2), (-a / 2, 0, -a / 2)],
        current=1.0, label="loop",
    )
    chip = ChipAssembly(conductors=(loop,), biases=())
    B = total_field(chip, (0, 0, 0))
    expected = 2 * np.sqrt(2) * MU0 * 1.0 / (np.pi * a)
    assert np.linalg.norm(B) == pytest.approx(expected, rel=1e-9)
    assert np.linalg.norm(B) == pytest.approx(1.131e-4, rel=1e-3)


def test_bias_only_field_uniform():
    chip = ChipAssembly(biases=(UniformBias((0, 0, 3.1e-4), "B_z"),))
    for p in [(0, 0, 0), (1e-3, 2e-3, -5e-3), (0.3, -0.2, 0.1)]:
        np.testing.assert_allclose(total_field(chip, p), [0, 0, 3.1e-4])


def test_all_sources_zero_field():
    chip = build_default_chip({"z_current": 0, "bias_z": 0, "bias_x": 0})
    np.testing.assert_array_equal(total_field(chip, (0, 1e-3, 0)), np.zeros(3))


def test_superposition_and_linearity():
    rng = np.random.default_rng(11)
    w1 = PolylineConductor(vertices=[(-1e-2, 0, 0), (1e-2, 0, 0)], current=1.2, label="a")
    w2 = PolylineConductor(vertices=[(0, -1e-3, -1e-2), (0, -1e-3, 1e-2)],
                           current=-0.7, label="b")
    both = ChipAssembly(conductors=(w1, w2), biases=())
    only1 = ChipAssembly(conductors=(w1,), biases=())
    only2 = ChipAssembly(conductors=(w2,), biases=())
    pts = rng.uniform(-5e-3, 5e-3, size=(20, 3)) + np.array([0, 3e-3, 0])
    t_both, t1, t2 = (source_table(c) for c in (both, only1, only2))
    np.testing.assert_allclose(
        field_of_table(t_both, pts),
        field_of_table(t1, pts) + field_of_table(t2, pts),
        rtol=0, atol=1e-18,
    )

    lam = 2.5
    scaled = build_default_chip({"z_current": 1.5 * lam,
                                 "bias_z": 6.26e-4 * lam, "bias_x": 2.75e-4 * lam})
    base = build_default_chip()
    np.testing.assert_allclose(
        field_of_table(source_table(scaled), pts),
        lam * field_of_table(source_table(base), pts),
        rtol=1e-12,
    )


def test_current_reversal_negates_field():
    chip = build_default_chip()
    neg = build_default_chip({"z_current": -1.5, "bias_z": -6.26e-4,
                              "bias_x": -2.75e-4})
    pts = np.array([[0, 5e-4, 0], [1e-3, 1e-3, -1e-3]])
    np.testing.assert_allclose(
        field_of_table(source_table(chip), pts),
        -field_of_table(source_table(neg), pts), rtol=0, atol=1e-19,
    )


def test_reversed_vertex_order_same_field():
    v = [(0.5e-3, 0, 5e-3), (0.5e-3, 0, 0), (-0.5e-3, 0, 0), (-0.5e-3, 0, -5e-3)]
    fwd = ChipAssembly(conductors=(PolylineConductor(vertices=v, current=1.5),), biases=())
    rev = ChipAssembly(conductors=(PolylineConductor(vertices=v[::-1], current=-1.5),),
                       biases=())
    pts = np.random.default_rng(3).uniform(-3e-3, 3e-3, (10, 3)) + np.array([0, 2e-3, 0])
    np.testing.assert_allclose(field_of_table(source_table(fwd), pts),
                               field_of_table(source_table(rev), pts),
                               rtol=0, atol=1e-19)


def test_jacobian_of_uniform_bias_is_zero():
    chip = ChipAssembly(biases=(UniformBias((1e-4, 2e-4, -3e-4)),))
    J = field_jacobian(chip, (1e-3, 2e-3, 3e-3))
    np.testing.assert_allclose(J, np.zeros((3, 3)), atol=1e-16)


def test_magnitude_gradient_matches_wire_oracle():
    d = 479.5e-6
    chip = long_wire_chip(1.5, 1.0)
    table = source_table(chip)
    h = 1e-6
    f = lambda y: np.linalg.norm(field_of_table(table, [[0.0, y, 0.0]])[0])
    slope = (f(d + h) - f(d - h)) / (2 * h)
    expected = infinite_wire_field(1.5, d) / d  # d(mu0 I/2 pi d)/dd magnitude
    assert abs(slope) == pytest.approx(expected, rel=1e-4)
    assert abs(slope) == pytest.approx(1.305, rel=2e-3)


def closed_circuit_chip():
    """Coil + closed asymmetric loop + biases: conserved currents only.

    Open polylines (dangling arm ends) carry a non-solenoidal Biot-Savart
    field, so curl checks are only meaningful for closed circuits.
    """
    a, b = 8e-3, 14e-3
    loop = PolylineConductor(
        vertices=[(-a / 2, 0, -b / 2), (a / 2, -1e-3, -b / 2), (a / 2, 0, b / 2),
                  (-a / 2, -0.5e-3, b / 2), (-a / 2, 0, -b / 2)],
        current=1.3, label="loop",
    )
    chip = build_default_chip({"z_current": 0.0, "coil_current": 1.77})
    return ChipAssembly(conductors=(loop,), coils=chip.coils, biases=chip.biases)


def _random_front_points(rng, n):
    # y >= 1.5 mm keeps (h/d)^2 truncation below the 1e-6 tolerance
    return np.column_stack([
        rng.uniform(-5e-3, 5e-3, n),
        rng.uniform(1.5e-3, 5e-3, n),
        rng.uniform(-5e-3, 5e-3, n),
    ])


def test_divergence_free_at_random_points():
    # div B = 0 holds for any Biot-Savart field, open or closed circuits
    table = source_table(build_default_chip({"u_current": 1.0, "coil_current": 1.0}))
    pts = _random_front_points(np.random.default_rng(42), 100)
    for p in pts:
        B = field_of_table(table, [p])[0]
        if np.linalg.norm(B) < 0.1e-4:
            continue
        J = field_jacobian(table, p, h=1e-6)
        assert abs(np.trace(J)) < 1e-6 * np.max(np.abs(J))


def test_curl_free_for_closed_circuits():
    table = source_table(closed_circuit_chip())
    pts = _random_front_points(np.random.default_rng(43), 100)
    for p in pts:
        J = field_jacobian(table, p, h=1e-6)
        scale = np.max(np.abs(J))
        curl = np.array([J[2, 1] - J[1, 2], J[0, 2] - J[2, 0], J[1, 0] - J[0, 1]])
        assert np.all(np.abs(curl) < 1e-6 * scale)


def test_hessian_of_magnitude_symmetric():
    chip = build_default_chip()
    H = field_hessian_of_magnitude(chip, (0, 1e-3, 0), h=2e-6)
    np.testing.assert_allclose(H, H.T, rtol=0, atol=1e-30)


def test_field_map_single_point():
    chip = build_default_chip()
    grid = field_map(chip, origin=(0, 1e-3, 0), spacing=(1e-4, 1e-4, 1e-4),
                     shape=(1, 1, 1))
    np.testing.assert_allclose(grid.B[0], total_field(chip, (0, 1e-3, 0)))


def test_field_map_grid_minimum_near_trap(reference_trap_position):
    chip = build_default_chip()
    spacing = 2e-4
    origin = np.array([0, 4.4e-4, 0]) - 5 * spacing
    grid = field_map(chip, origin, (spacing,) * 3, (11, 11, 11))
    imin = int(np.argmin(grid.Bnorm))
    pmin = grid.points()[imin]
    assert np.linalg.norm(pmin - reference_trap_position) <= np.sqrt(3) * spacing


def test_field_map_singular_point_names_index():
    chip = build_default_chip()
    with pytest.raises(SingularityError, match="index"):
        field_map(chip, origin=(0, 0, 0), spacing=(1e-3, 1e-3, 1e-3), shape=(2, 2, 2))


def test_field_csv_deterministic(tmp_path):
    chip = build_default_chip()
    grid = field_map(chip, (0, 0.5e-3, -1e-3), (1e-4, 1e-4, 1e-4), (3, 4, 5))
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_field_csv(grid, p1)
    write_field_csv(field_map(chip, (0, 0.5e-3, -1e-3), (1e-4, 1e-4, 1e-4), (3, 4, 5)), p2)
    b1, b2 = p1.read_bytes(), p2.read_bytes()
    assert b1 == b2
    head = b1.decode().splitlines()[0]
    assert head == "x_m,y_m,z_m,Bx_T,By_T,Bz_T,Bnorm_T"
    assert len(b1.decode().splitlines()) == 1 + 3 * 4 * 5
