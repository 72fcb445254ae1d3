import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevmem.grid import (
    GridSpec,
    Pose2,
    backward_flow,
    compose,
    inverse,
    map_coords,
    relative_transform,
    wrap_angle,
)
from oracles import exact_source

coord = st.floats(-50, 50, allow_nan=False)
angle = st.floats(-10, 10, allow_nan=False)
poses = st.builds(Pose2, coord, coord, angle)


def close(a: Pose2, b: Pose2, tol=1e-9):
    d = abs(wrap_angle(a.yaw - b.yaw))
    return abs(a.x - b.x) < tol and abs(a.y - b.y) < tol and d < tol


def test_compose_examples():
    p = Pose2(1.5, -2.0, 0.3)
    assert close(compose(Pose2.identity(), p), p)
    assert close(compose(Pose2(1, 0, 0), Pose2(1, 0, 0)), Pose2(2, 0, 0))
    # rotate by 90 degrees then step forward 1: ends at (0, 1)
    assert close(compose(Pose2(0, 0, math.pi / 2), Pose2(1, 0, 0)), Pose2(0, 1, math.pi / 2))


def test_matrix_oracle_matches_compose(rng):
    for _ in range(20):
        a = Pose2(*rng.normal(size=2), rng.uniform(-4, 4))
        b = Pose2(*rng.normal(size=2), rng.uniform(-4, 4))
        m = a.matrix() @ b.matrix()
        c = compose(a, b)
        np.testing.assert_allclose(c.matrix(), m, atol=1e-12)


def test_yaw_range():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    assert -math.pi < Pose2(0, 0, -7.0).yaw <= math.pi


def test_inverse_examples():
    assert close(inverse(Pose2.identity()), Pose2.identity())
    assert close(inverse(Pose2(3, 0, 0)), Pose2(-3, 0, 0))
    # inverse of a 90 degree turn at (1, 0): undo rotation then translation
    assert close(inverse(Pose2(1, 0, math.pi / 2)), Pose2(0, 1, -math.pi / 2))


@settings(max_examples=200, deadline=None)
@given(poses)
def test_inverse_round_trip(p):
    assert close(compose(p, inverse(p)), Pose2.identity())
    assert close(compose(inverse(p), p), Pose2.identity())


@settings(max_examples=200, deadline=None)
@given(poses, poses, poses)
def test_associative(a, b, c):
    assert close(compose(compose(a, b), c), compose(a, compose(b, c)), tol=1e-7)


def test_relative_transform():
    prev, cur = Pose2(0, 0, 0), Pose2(2, 0, 0)
    # a point 2 m ahead of the previous ego sits at the current ego origin
    rel = relative_transform(prev, cur)
    assert close(rel, Pose2(-2, 0, 0))
    np.testing.assert_allclose(rel.apply(np.array([[2.0, 0.0]])), [[0.0, 0.0]], atol=1e-12)
    a, b = Pose2(3, -1, 0.7), Pose2(5, 2, -0.4)
    assert close(relative_transform(a, a), Pose2.identity())
    # chaining relative motions equals the direct relative motion
    c = Pose2(-1, 4, 2.0)
    assert close(compose(relative_transform(b, c), relative_transform(a, b)), relative_transform(a, c))


def test_gridspec_validation():
    with pytest.raises(ValueError):
        GridSpec(0, 10)
    with pytest.raises(ValueError):
        GridSpec(5, 10, 0.0)
    g = GridSpec()
    assert g.shape == (50, 100) and g.n_cells == 5000


def test_grid_ego_round_trip():
    for spec in (GridSpec(), GridSpec(7, 12, 0.5), GridSpec(1, 1)):
        ij = spec.cell_centers().reshape(-1, 2)
        back = spec.ego_to_grid(spec.grid_to_ego(ij))
        assert np.abs(back - ij).max() < 1e-9


def test_axis_convention():
    spec = GridSpec(5, 9, 2.0)
    # centre cell is the ego origin; +j is forward x, +i is left y
    np.testing.assert_allclose(spec.grid_to_ego(np.array([[2, 4]])), [[0, 0]])
    np.testing.assert_allclose(spec.grid_to_ego(np.array([[2, 5]])), [[2, 0]])
    np.testing.assert_allclose(spec.grid_to_ego(np.array([[3, 4]])), [[0, 2]])


def test_flow_identity_is_integral():
    spec = GridSpec(6, 11)
    flow = backward_flow(spec, Pose2.identity())
    np.testing.assert_array_equal(flow.coords, spec.cell_centers().astype(float))
    assert np.all(flow.coords == np.round(flow.coords))
    assert flow.in_bounds.all()


def test_flow_forward_one_cell():
    spec = GridSpec(4, 8)
    # moving forward 1 m: the previous frame's content is 1 m further back in the new frame
    rel = relative_transform(Pose2(0, 0, 0), Pose2(1, 0, 0))
    flow = backward_flow(spec, rel)
    np.testing.assert_array_equal(flow.rows, np.arange(4)[:, None] * np.ones((1, 8)))
    np.testing.assert_array_equal(flow.cols, np.arange(8)[None, :] + 1.0 + np.zeros((4, 1)))
    assert flow.in_bounds[:, :-1].all() and not flow.in_bounds[:, -1].any()


def test_flow_quarter_turn_square_grid():
    spec = GridSpec(9, 9)
    rel = Pose2(0, 0, math.pi / 2)
    flow = backward_flow(spec, rel)
    np.testing.assert_allclose(flow.coords, exact_source(spec, rel), atol=1e-12)
    # a quarter turn of a square grid about its centre maps cell centres onto cell centres
    assert np.all(flow.coords == np.round(flow.coords)) and flow.in_bounds.all()


def test_flow_matches_matrix_oracle(rng):
    spec = GridSpec(10, 14, 0.5)
    for _ in range(10):
        rel = Pose2(*rng.normal(size=2), rng.uniform(-3, 3))
        flow = backward_flow(spec, rel)
        np.testing.assert_allclose(flow.coords, exact_source(spec, rel), atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-math.pi, math.pi))
def test_flow_round_trip(x, y, yaw):
    spec = GridSpec(12, 16)
    rel = Pose2(x, y, yaw)
    f1 = backward_flow(spec, rel)
    back = map_coords(spec, inverse(rel), f1.coords.reshape(-1, 2)).reshape(f1.coords.shape)
    ok = f1.in_bounds & spec.in_bounds(back)
    err = np.abs(back - spec.cell_centers())[ok]
    assert err.size == 0 or err.max() < 1e-6
