import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import Point, Polygon

from trafficrft.geometry import (
    box_corners,
    box_signed_distance,
    boxes_overlap,
    compose,
    distance_to_polygon_boundary,
    points_in_polygon,
    polygon_is_simple,
    polyline_project,
    relative,
    wrap_angle,
)

finite = st.floats(-50, 50, allow_nan=False)
angle = st.floats(-10, 10, allow_nan=False)


def test_wrap_angle_range_and_boundary():
    a = np.linspace(-20, 20, 2001)
    w = wrap_angle(a)
    assert np.all(w > -math.pi) and np.all(w <= math.pi)
    assert np.allclose(np.sin(w), np.sin(a)) and np.allclose(np.cos(w), np.cos(a))
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)


@settings(max_examples=200, deadline=None)
@given(finite, finite, angle, finite, finite, angle)
def test_relative_inverts_compose(x, y, h, dx, dy, dh):
    pose = np.array([x, y, h])
    delta = np.array([dx, dy, dh])
    back = relative(pose, compose(pose, delta))
    assert np.allclose(back[:2], delta[:2], atol=1e-9)
    assert abs(wrap_angle(back[2] - dh)) < 1e-9


def test_box_corners_axis_aligned():
    c = box_corners([1.0, 2.0, 0.0], 4.0, 2.0)
    assert np.allclose(sorted(map(tuple, c)), sorted([(3, 3), (-1, 3), (-1, 1), (3, 1)]))


def _shapely_box(pose, length, width):
    return Polygon(box_corners(pose, length, width))


def _sampled_overlap(pa, la, wa, pb, lb, wb, n=60):
    """Dense point sampling of box A tested against box B: an independent overlap oracle."""
    u = (np.arange(n) + 0.5) / n - 0.5
    gx, gy = np.meshgrid(u * la, u * wa)
    c, s = math.cos(pa[2]), math.sin(pa[2])
    px = pa[0] + c * gx - s * gy
    py = pa[1] + s * gx + c * gy
    c, s = math.cos(pb[2]), math.sin(pb[2])
    lx = c * (px - pb[0]) + s * (py - pb[1])
    ly = -s * (px - pb[0]) + c * (py - pb[1])
    return bool(np.any((np.abs(lx) < lb / 2) & (np.abs(ly) < wb / 2)))


def test_box_fixtures():
    assert boxes_overlap([0, 0, 0], 2, 1, [1, 0, 0], 2, 1)
    assert not boxes_overlap([0, 0, 0], 2, 1, [5, 0, 0], 2, 1)
    assert box_signed_distance([0, 0, 0], 2, 1, [5, 0, 0], 2, 1) == pytest.approx(3.0)


def test_sat_agrees_with_sampling_oracle_and_shapely(rng):
    disagreements = 0
    for _ in range(1000):
        pa = np.array([0.0, 0.0, rng.uniform(-math.pi, math.pi)])
        pb = np.array([*rng.uniform(-6, 6, 2), rng.uniform(-math.pi, math.pi)])
        la, wa, lb, wb = rng.uniform(1, 5), rng.uniform(0.5, 2.5), rng.uniform(1, 5), rng.uniform(0.5, 2.5)
        sat = bool(boxes_overlap(pa, la, wa, pb, lb, wb))
        shp = _shapely_box(pa, la, wa).intersection(_shapely_box(pb, lb, wb)).area > 1e-9
        assert sat == shp
        if sat != _sampled_overlap(pa, la, wa, pb, lb, wb):
            # sampling can only miss slivers thinner than its grid
            assert _shapely_box(pa, la, wa).intersection(_shapely_box(pb, lb, wb)).area < 0.05
            disagreements += 1
    assert disagreements <= 10


def test_signed_distance_matches_shapely_gap_and_sign(rng):
    for _ in range(300):
        pa = np.array([*rng.uniform(-3, 3, 2), rng.uniform(-math.pi, math.pi)])
        pb = np.array([*rng.uniform(-8, 8, 2), rng.uniform(-math.pi, math.pi)])
        dims = rng.uniform(0.5, 4, 4)
        d = float(box_signed_distance(pa, dims[0], dims[1], pb, dims[2], dims[3]))
        A, B = _shapely_box(pa, dims[0], dims[1]), _shapely_box(pb, dims[2], dims[3])
        if A.intersection(B).area > 1e-9:
            assert d < 0
        else:
            assert d == pytest.approx(A.distance(B), abs=1e-9)


def test_signed_distance_penetration_axis_aligned():
    # 1 m overlap along x between 2x1 boxes
    assert box_signed_distance([0, 0, 0], 2, 1, [1, 0, 0], 2, 1) == pytest.approx(-1.0)


def test_polygon_queries_match_shapely(rng):
    ring = np.array([[0, 0], [10, 0], [10, 4], [6, 4], [6, 10], [0, 10]], float)
    poly = Polygon(ring)
    pts = rng.uniform(-2, 12, (400, 2))
    inside = points_in_polygon(pts, ring)
    dist = distance_to_polygon_boundary(pts, ring)
    for p, i, d in zip(pts, inside, dist):
        assert i == poly.contains(Point(p))
        assert d == pytest.approx(poly.exterior.distance(Point(p)), abs=1e-9)


def test_polygon_is_simple():
    assert polygon_is_simple([[0, 0], [1, 0], [1, 1], [0, 1]])
    assert not polygon_is_simple([[0, 0], [1, 1], [1, 0], [0, 1]])  # bow tie
    assert not polygon_is_simple([[0, 0], [1, 0]])


def test_polyline_project():
    line = np.array([[0, 0], [10, 0], [10, 10]], float)
    s, lat = polyline_project(np.array([[5, 1], [11, 5], [-3, 0]]), line)
    assert np.allclose(s, [5, 15, 0])
    assert np.allclose(lat, [1, 1, 3])
