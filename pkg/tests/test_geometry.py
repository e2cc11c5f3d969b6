import numpy as np
import pytest

from lamlab.geometry import (
    BracketError,
    GeometryError,
    InterfaceStack,
    OrderingViolation,
    Polynomial,
    anchor_points,
    classify_point,
    cosine,
    eval_interface,
    extended_tangent,
    flat,
    frame_at_anchor,
    frame_field,
    geometry_selftest,
    interface_normal,
    neck_stack,
    nearest_projection,
    orthonormal_frame,
    parabola,
    raw_tangent,
)

SQ2 = np.sqrt(2.0)


def line(a=1.0, c=0.0):
    return Polynomial([c, a], label="line")


def test_eval_interface_examples():
    assert eval_interface(InterfaceStack([parabola(1.0)]), 1, 0.5, 2) == pytest.approx((0.25, 1.0, 2.0))
    assert eval_interface(InterfaceStack([flat(0.0)]), 1, 0.3, 1) == (0.0, 0.0)
    out = eval_interface(InterfaceStack([cosine(0.1, 2.0)]), 1, 0.0, 3)
    assert out == pytest.approx((0.1, 0.0, -0.4, 0.0), abs=1e-15)


def test_eval_interface_errors():
    st = InterfaceStack([flat(0.0)])
    with pytest.raises(GeometryError):
        eval_interface(st, 2, 0.0)
    with pytest.raises(GeometryError):
        eval_interface(st, 1, 1.0)


def test_ordering_violation():
    with pytest.raises(OrderingViolation):
        InterfaceStack([flat(0.5), flat(-0.5)])
    with pytest.raises(OrderingViolation):
        InterfaceStack([flat(1.2)])


def test_classify_point():
    st = InterfaceStack([flat(0.0)])
    lo, up = classify_point(st, [0.3, -0.5]), classify_point(st, [0.0, 0.2])
    assert (lo.kind, lo.j, up.kind, up.j) == ("interior", 1, "interior", 2)
    inc = classify_point(st, [0.1, 0.0])
    assert (inc.kind, inc.j) == ("interface", 1)
    assert classify_point(st, [0.3, -0.5]).proximity == pytest.approx(0.5)
    with pytest.raises(GeometryError):
        classify_point(st, [1.5, 0.0])


def test_interface_normal():
    assert interface_normal(InterfaceStack([flat(0.2)]), 1, 0.7) == pytest.approx([0.0, 1.0])
    assert interface_normal(InterfaceStack([line()]), 1, 0.0) == pytest.approx(np.array([-1, 1]) / SQ2)
    assert interface_normal(InterfaceStack([parabola(1.0)]), 1, 0.5) == pytest.approx(np.array([-1, 1]) / SQ2)


def test_raw_tangent_cases():
    st = InterfaceStack([parabola(1.0)])
    assert raw_tangent(st, 1, [0.5, 0.5]) == pytest.approx([1.0, 1.0])
    # below the lowest interface the slope of h_1 is copied, constant in x^d
    assert raw_tangent(st, 1, [0.5, 0.0]) == pytest.approx([1.0, 1.0])
    flats = InterfaceStack([flat(-0.3), flat(0.4)])
    for x in ([0.1, -0.9], [0.2, 0.0], [-0.5, 0.8]):
        assert raw_tangent(flats, 1, x) == pytest.approx([1.0, 0.0])


def test_raw_tangent_interpolates_between_interfaces():
    st = InterfaceStack([line(0.2, -0.5), line(-0.2, 0.5)])
    # weights follow the relative height inside the strip
    assert raw_tangent(st, 1, [0.0, 0.0]) == pytest.approx([1.0, 0.0])
    assert raw_tangent(st, 1, [0.0, -0.25]) == pytest.approx([1.0, 0.1])


def test_orthonormal_frame_2d():
    st = InterfaceStack([parabola(1.0)])
    fr = orthonormal_frame(st, np.array([0.5, 0.5]))
    assert fr.tangents[0] == pytest.approx(np.array([1, 1]) / SQ2)
    assert fr.normal == pytest.approx(np.array([-1, 1]) / SQ2)
    assert fr.matrix @ fr.matrix.T == pytest.approx(np.eye(2), abs=1e-14)


def test_orthonormal_frame_3d():
    # h = a (x1^3 + x2^3) has slope (1, 1) at x' = (0.9, 0.9)
    a = 1.0 / (3 * 0.81)
    st = InterfaceStack([Polynomial({(3, 0): a, (0, 3): a}, nvars=2)], dim=3)
    fr = orthonormal_frame(st, np.array([0.9, 0.9, 0.9]))
    assert fr.tangents[0] == pytest.approx(np.array([1, 0, 1]) / SQ2)
    assert fr.tangents[1] == pytest.approx(np.array([-1, 2, 1]) / np.sqrt(6))
    assert fr.normal == pytest.approx(np.array([-1, -1, 1]) / np.sqrt(3))
    flat3 = orthonormal_frame(InterfaceStack([flat(0.0, 3)], dim=3), np.array([0.2, 0.1, 0.3]))
    assert flat3.matrix == pytest.approx(np.eye(3))


def test_nearest_projection():
    y, d = nearest_projection(InterfaceStack([flat(0.0)]), 1, [0.3, 0.4])
    assert y == pytest.approx([0.3, 0.0]) and d == pytest.approx(0.4, abs=1e-12)
    y, d = nearest_projection(InterfaceStack([line()]), 1, [0.0, 0.2])
    assert y == pytest.approx([0.1, 0.1]) and d == pytest.approx(0.2 / SQ2, abs=1e-12)
    y, d = nearest_projection(InterfaceStack([parabola(1.0)]), 1, [0.0, 0.0])
    assert y == pytest.approx([0.0, 0.0], abs=1e-8) and d == pytest.approx(0.0, abs=1e-12)


def test_nearest_projection_bracket_error():
    with pytest.raises(BracketError):
        nearest_projection(InterfaceStack([line(0.9)]), 1, [0.0, 0.5], half_width=0.01)


def test_frame_at_anchor():
    lam = frame_at_anchor(InterfaceStack([flat(0.0)]), [0.2, -0.5]).matrix
    assert lam == pytest.approx(np.eye(2))
    fr = frame_at_anchor(InterfaceStack([line()]), [0.0, -0.05])
    assert fr.matrix @ fr.normal == pytest.approx([0.0, 1.0])
    rot = np.array([[np.cos(np.pi / 4), np.sin(np.pi / 4)], [-np.sin(np.pi / 4), np.cos(np.pi / 4)]])
    assert fr.matrix == pytest.approx(rot)


def test_anchor_points():
    pts = anchor_points(InterfaceStack([flat(0.0)]), [0.0, -0.5], 1)
    assert np.allclose(pts, [[0, -0.5], [0, 0]])
    pts = anchor_points(InterfaceStack([flat(-0.2), flat(0.3)]), [0.1, 0.0], 2)
    assert np.allclose(pts, [[0.1, -0.2], [0.1, 0.0], [0.1, 0.3]])
    pts = anchor_points(InterfaceStack([parabola(1.0)]), [0.5, 0.5], 2)
    assert np.allclose(pts, [[0.5, 0.25], [0.5, 0.5]])


def test_extended_tangent():
    st = InterfaceStack([flat(-0.2), flat(0.3)])
    assert extended_tangent(st, 2, 1, [0.4, -0.8]) == pytest.approx([1.0, 0.0])
    par = InterfaceStack([parabola(1.0)])
    assert extended_tangent(par, 2, 1, [0.5, -0.9]) == pytest.approx(np.array([1, 1]) / SQ2)
    # the strip-2 extension agrees with l on the trace of Gamma_1
    st2 = InterfaceStack([parabola(0.3, 0.0, -0.3), parabola(-0.2, 0.0, 0.4)])
    xp = 0.35
    on = np.array([xp, eval_interface(st2, 1, xp, 0)[0]])
    assert extended_tangent(st2, 2, 1, on) == pytest.approx(frame_field(st2, on[None]).tangents[0, 0], abs=1e-12)


def test_extended_tangent_refuses_touching_donor():
    st = InterfaceStack([parabola(-0.5), parabola(0.5)])  # touch at x' = 0
    with pytest.raises(GeometryError):
        extended_tangent(st, 2, 1, [0.0, -0.5])


def test_selftest_flat_stack_is_trivial():
    (rep,) = geometry_selftest(InterfaceStack([flat(-0.3), flat(0.2)]), budget=2000)
    assert rep.holder_half == 0.0
    assert rep.derivative_gap_product == 0.0
    assert max(rep.jumps) == 0.0


def test_selftest_neck_raw_vertical_derivative():
    (rep,) = geometry_selftest(neck_stack, budget=4000, eps_list=[0.01])
    # sup 2|x'|/(eps + x'^2) = 1/sqrt(eps) at x' = sqrt(eps)
    assert rep.raw_vertical_derivative_sup == pytest.approx(10.0, rel=1e-3)
    assert rep.derivative_gap_product <= 2.0 + 1e-9


def test_selftest_deterministic():
    a = geometry_selftest(neck_stack, budget=2000, eps_list=[0.05])[0].as_dict()
    b = geometry_selftest(neck_stack, budget=2000, eps_list=[0.05])[0].as_dict()
    assert a == b


def test_selftest_budget_floor():
    with pytest.raises(GeometryError):
        geometry_selftest(InterfaceStack([flat(0.0)]), budget=10)
