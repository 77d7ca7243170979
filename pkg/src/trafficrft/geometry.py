"""Planar geometry kernel shared by the tokenizer, metrics and generator.

Poses are ``(..., 3)`` arrays of ``(x, y, heading)``. Oriented boxes are given
by a pose plus ``length`` (along the heading) and ``width``.
"""

from __future__ import annotations

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(angle):
    """Wrap angles into the half-open interval (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(angle, dtype=float), TWO_PI)


def compose(pose, delta):
    """Apply a local-frame displacement ``delta`` to ``pose``.

    Both arguments broadcast over leading dimensions.
    """
    pose = np.asarray(pose, dtype=float)
    delta = np.asarray(delta, dtype=float)
    c, s = np.cos(pose[..., 2]), np.sin(pose[..., 2])
    x = pose[..., 0] + c * delta[..., 0] - s * delta[..., 1]
    y = pose[..., 1] + s * delta[..., 0] + c * delta[..., 1]
    h = wrap_angle(pose[..., 2] + delta[..., 2])
    return np.stack([x, y, h], axis=-1)


def relative(pose_from, pose_to):
    """Express ``pose_to`` in the local frame of ``pose_from`` (inverse of compose)."""
    pose_from = np.asarray(pose_from, dtype=float)
    pose_to = np.asarray(pose_to, dtype=float)
    dx = pose_to[..., 0] - pose_from[..., 0]
    dy = pose_to[..., 1] - pose_from[..., 1]
    c, s = np.cos(pose_from[..., 2]), np.sin(pose_from[..., 2])
    return np.stack(
        [c * dx + s * dy, -s * dx + c * dy, wrap_angle(pose_to[..., 2] - pose_from[..., 2])],
        axis=-1,
    )


def box_corners(pose, length, width):
    """Corners of oriented rectangles, shape ``(..., 4, 2)``, counter-clockwise."""
    pose = np.asarray(pose, dtype=float)
    length = np.asarray(length, dtype=float)
    width = np.asarray(width, dtype=float)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.stack(
        [
            np.stack([hl, hw], -1),
            np.stack([-hl, hw], -1),
            np.stack([-hl, -hw], -1),
            np.stack([hl, -hw], -1),
        ],
        axis=-2,
    )
    local = np.broadcast_to(local, pose.shape[:-1] + (4, 2))
    c = np.cos(pose[..., 2])[..., None]
    s = np.sin(pose[..., 2])[..., None]
    x = pose[..., 0][..., None] + c * local[..., 0] - s * local[..., 1]
    y = pose[..., 1][..., None] + s * local[..., 0] + c * local[..., 1]
    return np.stack([x, y], axis=-1)


def _box_axes(pose):
    h = np.asarray(pose, dtype=float)[..., 2]
    c, s = np.cos(h), np.sin(h)
    return np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], axis=-2)


def _sat_overlaps(corners_a, corners_b, axes):
    """Overlap amount of the projections on each axis, shape ``(..., n_axes)``."""
    pa = np.einsum("...kd,...jd->...jk", corners_a, axes)
    pb = np.einsum("...kd,...jd->...jk", corners_b, axes)
    return np.minimum(pa.max(-1) - pb.min(-1), pb.max(-1) - pa.min(-1))


def boxes_overlap(pose_a, len_a, wid_a, pose_b, len_b, wid_b, inclusive=False):
    """Separating-axis overlap test for oriented rectangles (vectorised).

    With ``inclusive`` touching boxes count as overlapping.
    """
    ca = box_corners(pose_a, len_a, wid_a)
    cb = box_corners(pose_b, len_b, wid_b)
    axes_a = _box_axes(pose_a)
    axes_b = _box_axes(pose_b)
    axes = np.concatenate(np.broadcast_arrays(axes_a, axes_b), axis=-2)
    ov = _sat_overlaps(ca, cb, axes)
    if inclusive:
        return np.all(ov >= 0.0, axis=-1)
    return np.all(ov > 0.0, axis=-1)


def point_segment_distance(points, seg_a, seg_b):
    """Euclidean distance from points to segments, broadcasting over leading dims."""
    points = np.asarray(points, dtype=float)
    seg_a = np.asarray(seg_a, dtype=float)
    seg_b = np.asarray(seg_b, dtype=float)
    abx, aby = seg_b[..., 0] - seg_a[..., 0], seg_b[..., 1] - seg_a[..., 1]
    apx, apy = points[..., 0] - seg_a[..., 0], points[..., 1] - seg_a[..., 1]
    denom = abx * abx + aby * aby
    safe = np.where(denom > 0, denom, 1.0)
    t = np.clip(np.where(denom > 0, (apx * abx + apy * aby) / safe, 0.0), 0.0, 1.0)
    return np.hypot(apx - t * abx, apy - t * aby)


def box_signed_distance(pose_a, len_a, wid_a, pose_b, len_b, wid_b):
    """Signed clearance between oriented rectangles.

    Positive values are the minimum gap between the boxes; negative values are
    the penetration depth (minimum translation along a separating-axis
    candidate). Zero means touching. ``< 0`` is exactly the strict SAT overlap.
    """
    ca = box_corners(pose_a, len_a, wid_a)
    cb = box_corners(pose_b, len_b, wid_b)
    axes = np.concatenate(np.broadcast_arrays(_box_axes(pose_a), _box_axes(pose_b)), axis=-2)
    ov = _sat_overlaps(ca, cb, axes)
    penetration = ov.min(axis=-1)

    ca, cb = np.broadcast_arrays(ca, cb)
    ea = np.roll(ca, -1, axis=-2)
    eb = np.roll(cb, -1, axis=-2)
    # vertices of A against edges of B and vice versa: (..., 4 vertices, 4 edges)
    d_ab = point_segment_distance(ca[..., :, None, :], cb[..., None, :, :], eb[..., None, :, :])
    d_ba = point_segment_distance(cb[..., :, None, :], ca[..., None, :, :], ea[..., None, :, :])
    gap = np.minimum(d_ab.min(axis=(-1, -2)), d_ba.min(axis=(-1, -2)))
    return np.where(penetration > 0.0, -penetration, gap)


def points_in_polygon(points, polygon):
    """Even-odd ray casting; ``polygon`` is an ``(n, 2)`` vertex ring (closure optional)."""
    points = np.asarray(points, dtype=float)
    poly = np.asarray(polygon, dtype=float)
    if np.allclose(poly[0], poly[-1]):
        poly = poly[:-1]
    x = points[..., 0][..., None]
    y = points[..., 1][..., None]
    x1, y1 = poly[:, 0], poly[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    crosses = (y1 > y) != (y2 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_int = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    hits = crosses & (x < x_int)
    return (np.count_nonzero(hits, axis=-1) % 2) == 1


def distance_to_polygon_boundary(points, polygon):
    points = np.asarray(points, dtype=float)
    poly = np.asarray(polygon, dtype=float)
    if not np.allclose(poly[0], poly[-1]):
        poly = np.vstack([poly, poly[:1]])
    d = point_segment_distance(points[..., None, :], poly[:-1], poly[1:])
    return d.min(axis=-1)


def segments_intersect(p1, p2, q1, q2) -> bool:
    """Proper or touching intersection of two closed segments."""

    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12 and min(
            a[1], b[1]
        ) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p1, p2, q1):
        return True
    if o2 == 0 and on_seg(p1, p2, q2):
        return True
    if o3 == 0 and on_seg(q1, q2, p1):
        return True
    return o4 == 0 and on_seg(q1, q2, p2)


def polygon_is_simple(polygon) -> bool:
    """True when no two non-adjacent edges of the ring touch or cross."""
    poly = np.asarray(polygon, dtype=float)
    if len(poly) >= 2 and np.allclose(poly[0], poly[-1]):
        poly = poly[:-1]
    n = len(poly)
    if n < 3:
        return False
    a = poly
    b = np.roll(poly, -1, axis=0)
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    if len(i) == 0:
        return True
    # cheap bounding-box rejection before the exact test
    lo_a, hi_a = np.minimum(a, b), np.maximum(a, b)
    box = np.all((lo_a[i] <= hi_a[j] + 1e-12) & (lo_a[j] <= hi_a[i] + 1e-12), axis=-1)
    for ii, jj in zip(i[box], j[box]):
        if segments_intersect(a[ii], b[ii], a[jj], b[jj]):
            return False
    return True


def polyline_project(points, polyline):
    """Project points onto a polyline.

    Returns ``(arc_length, lateral_distance)`` of the closest point for each input.
    """
    points = np.asarray(points, dtype=float)
    line = np.asarray(polyline, dtype=float)
    ax, ay = line[:-1, 0], line[:-1, 1]
    abx, aby = line[1:, 0] - ax, line[1:, 1] - ay
    seg2 = abx * abx + aby * aby
    seg_len = np.sqrt(seg2)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])[:-1]
    px = points[..., 0][..., None] - ax
    py = points[..., 1][..., None] - ay
    t = np.clip((px * abx + py * aby) / np.where(seg2 > 0, seg2, 1.0), 0.0, 1.0)
    ex, ey = px - t * abx, py - t * aby
    d2 = ex * ex + ey * ey
    idx = np.argmin(d2, axis=-1)[..., None]
    lat = np.sqrt(np.take_along_axis(d2, idx, -1)[..., 0])
    s = cum[idx[..., 0]] + np.take_along_axis(t, idx, -1)[..., 0] * seg_len[idx[..., 0]]
    return s, lat


def polyline_arclength(polyline) -> np.ndarray:
    line = np.asarray(polyline, dtype=float)
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(line, axis=0), axis=-1))])
