"""Realism Meta analog: ten likelihood-style sub-scores plus minADE.

Features are extracted at 10 Hz from logged and simulated tracks. Each
sub-score measures how much probability the rollout-induced distribution (a
histogram per agent and step, or a smoothed Bernoulli rate for boolean
features) assigns to the logged value. Only future steps are scored.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    box_signed_distance,
    distance_to_polygon_boundary,
    points_in_polygon,
    polyline_arclength,
    polyline_project,
    wrap_angle,
)
from .scenario import CURRENT_INDEX, DT, MapData, Scenario

FEATURES = (
    "linear_speed",
    "linear_acceleration",
    "angular_speed",
    "angular_acceleration",
    "distance_to_nearest_object",
    "collision",
    "time_to_collision",
    "distance_to_road_edge",
    "offroad",
    "traffic_light_violation",
)

WEIGHTS = {
    "linear_speed": 0.05,
    "linear_acceleration": 0.05,
    "angular_speed": 0.05,
    "angular_acceleration": 0.05,
    "distance_to_nearest_object": 0.10,
    "collision": 0.25,
    "time_to_collision": 0.10,
    "distance_to_road_edge": 0.05,
    "offroad": 0.25,
    "traffic_light_violation": 0.05,
}

COLUMNS = {
    "linear_speed": "Lin. Speed",
    "linear_acceleration": "Lin. Acc.",
    "angular_speed": "Ang. Speed",
    "angular_acceleration": "Ang. Acc.",
    "distance_to_nearest_object": "Dist. to Obj.",
    "collision": "Collision",
    "time_to_collision": "T.T.C.",
    "distance_to_road_edge": "Dist. to Road Edge",
    "offroad": "Offroad",
    "traffic_light_violation": "Traf. Light Violation",
}

BOOLEAN_FEATURES = frozenset({"collision", "offroad", "traffic_light_violation"})
TTC_MAX = 5.0
LANE_ASSIGN_DIST = 2.0
CONTACT_TOL = 1e-9


@dataclass(frozen=True)
class Bins:
    lo: float
    hi: float
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("bin count must be >= 2")
        if not self.lo < self.hi:
            raise ValueError("bin range must satisfy min < max")

    def index(self, values):
        v = np.clip(np.asarray(values, dtype=float), self.lo, self.hi)
        i = np.floor((v - self.lo) / (self.hi - self.lo) * self.count).astype(int)
        return np.clip(i, 0, self.count - 1)


@dataclass(frozen=True)
class HistogramSpec:
    bins: dict = field(
        default_factory=lambda: {
            "linear_speed": Bins(0.0, 30.0, 30),
            "linear_acceleration": Bins(-10.0, 10.0, 40),
            "angular_speed": Bins(-math.pi, math.pi, 32),
            "angular_acceleration": Bins(-10.0, 10.0, 40),
            "distance_to_nearest_object": Bins(-2.0, 40.0, 42),
            "time_to_collision": Bins(0.0, TTC_MAX, 25),
            "distance_to_road_edge": Bins(-20.0, 20.0, 40),
        }
    )
    smoothing: float = 1e-3

    def __post_init__(self):
        if not self.smoothing > 0:
            raise ValueError("smoothing must be positive")


@dataclass(frozen=True, eq=False)
class FeatureSeries:
    """Per (agent, step) values with a validity and an applicability mask.

    Arrays may carry a leading rollout axis: ``(..., A, T)``.
    """

    name: str
    values: np.ndarray
    valid: np.ndarray
    applicable: np.ndarray | None = None

    @property
    def boolean(self) -> bool:
        return self.name in BOOLEAN_FEATURES

    @property
    def mask(self) -> np.ndarray:
        if self.applicable is None:
            return self.valid
        return self.valid & np.broadcast_to(self.applicable, self.valid.shape)


# --------------------------------------------------------------------------
# feature extraction


def kinematic_features(poses, valid, dt: float = DT) -> dict[str, FeatureSeries]:
    """Speeds and accelerations from backward differences at 10 Hz.

    ``poses`` is ``(..., T, 3)``; entry ``t`` uses steps ``t-1`` (and ``t-2``
    for accelerations), so it is masked unless all of them are valid.
    """
    poses = np.asarray(poses, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    T = poses.shape[-2]
    speed = np.zeros(poses.shape[:-1])
    ang = np.zeros(poses.shape[:-1])
    v1 = np.zeros(valid.shape, bool)
    disp = np.diff(poses[..., :2], axis=-2)
    speed[..., 1:] = np.hypot(disp[..., 0], disp[..., 1]) / dt
    ang[..., 1:] = wrap_angle(np.diff(poses[..., 2], axis=-1)) / dt
    v1[..., 1:] = valid[..., 1:] & valid[..., :-1]
    acc = np.zeros_like(speed)
    aacc = np.zeros_like(speed)
    v2 = np.zeros_like(v1)
    if T > 2:
        acc[..., 2:] = np.diff(speed[..., 1:], axis=-1) / dt
        aacc[..., 2:] = np.diff(ang[..., 1:], axis=-1) / dt
        v2[..., 2:] = v1[..., 2:] & v1[..., 1:-1]
    return {
        "linear_speed": FeatureSeries("linear_speed", speed, v1),
        "linear_acceleration": FeatureSeries("linear_acceleration", acc, v2),
        "angular_speed": FeatureSeries("angular_speed", ang, v1),
        "angular_acceleration": FeatureSeries("angular_acceleration", aacc, v2),
    }


def _pair_distances(poses, valid, lengths, widths, chunk: int = 4096):
    """Signed box distance between every agent pair, ``(A, A, T)`` with invalid pairs at +inf."""
    A, T = poses.shape[:2]
    out = np.full((A, A, T), np.inf)
    if A < 2:
        return out
    ia, ib = np.triu_indices(A, k=1)
    step = max(1, chunk // max(len(ia), 1))
    for t0 in range(0, T, step):
        sl = slice(t0, min(T, t0 + step))
        pa = poses[ia, sl]
        pb = poses[ib, sl]
        d = box_signed_distance(
            pa, lengths[ia, None], widths[ia, None], pb, lengths[ib, None], widths[ib, None]
        )
        ok = valid[ia, sl] & valid[ib, sl]
        d = np.where(ok, d, np.inf)
        out[ia, ib, sl] = d
        out[ib, ia, sl] = d
    return out


def _axis_interval(c, w, r, t_max):
    """Times in ``[0, t_max]`` where ``|c + t w| <= r`` (elementwise)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-r - c) / w
        t2 = (r - c) / w
    lo = np.where(w != 0, np.minimum(t1, t2), np.where(np.abs(c) <= r, 0.0, np.inf))
    hi = np.where(w != 0, np.maximum(t1, t2), np.where(np.abs(c) <= r, t_max, -np.inf))
    return lo, hi


def time_to_collision(pose_a, vel_a, len_a, wid_a, pose_b, vel_b, len_b, wid_b, dt: float = DT, t_max: float = TTC_MAX):
    """Earliest ``k * dt`` at which the boxes touch under constant velocity, capped at ``t_max``.

    Headings stay fixed during extrapolation, so each separating-axis
    projection is linear in time and the contact window is an interval
    intersection. All arguments broadcast.
    """
    pose_a = np.asarray(pose_a, float)
    pose_b = np.asarray(pose_b, float)
    d0 = pose_b[..., :2] - pose_a[..., :2]
    dv = np.asarray(vel_b, float) - np.asarray(vel_a, float)
    ha, hb = pose_a[..., 2], pose_b[..., 2]
    axes = [
        np.stack([np.cos(ha), np.sin(ha)], -1),
        np.stack([-np.sin(ha), np.cos(ha)], -1),
        np.stack([np.cos(hb), np.sin(hb)], -1),
        np.stack([-np.sin(hb), np.cos(hb)], -1),
    ]
    la, wa = 0.5 * np.asarray(len_a, float), 0.5 * np.asarray(wid_a, float)
    lb, wb = 0.5 * np.asarray(len_b, float), 0.5 * np.asarray(wid_b, float)
    lo = np.zeros(np.broadcast(d0[..., 0], dv[..., 0], ha, hb).shape)
    hi = np.full(lo.shape, t_max)
    for u in axes:
        ra = la * np.abs(np.sum(u * axes[0], -1)) + wa * np.abs(np.sum(u * axes[1], -1))
        rb = lb * np.abs(np.sum(u * axes[2], -1)) + wb * np.abs(np.sum(u * axes[3], -1))
        a_lo, a_hi = _axis_interval(np.sum(u * d0, -1), np.sum(u * dv, -1), ra + rb + CONTACT_TOL, t_max)
        lo = np.maximum(lo, a_lo)
        hi = np.minimum(hi, a_hi)
    k = np.ceil(np.maximum(lo, 0.0) / dt - 1e-9)
    t = k * dt
    hit = (t <= hi + 1e-12) & (t <= t_max)
    return np.where(hit, t, t_max)


def interactive_features(poses, valid, lengths, widths, is_vehicle, dt: float = DT) -> dict[str, FeatureSeries]:
    """Collision, distance to nearest object and TTC for one joint scene state.

    ``poses`` is ``(A, T, 3)``. Collision is true exactly when the signed
    distance to the nearest object is negative.
    """
    poses = np.asarray(poses, float)
    valid = np.asarray(valid, bool)
    lengths = np.asarray(lengths, float)
    widths = np.asarray(widths, float)
    is_vehicle = np.asarray(is_vehicle, bool)
    A, T = poses.shape[:2]
    pair = _pair_distances(poses, valid, lengths, widths)
    nearest = pair.min(axis=1) if A > 1 else np.full((A, T), np.inf)
    has_other = np.isfinite(nearest)
    dist = np.where(has_other, nearest, 0.0)
    collision = has_other & (nearest < 0.0)

    vel = np.zeros((A, T, 2))
    vel[:, 1:] = np.diff(poses[..., :2], axis=1) / dt
    vvalid = np.zeros((A, T), bool)
    vvalid[:, 1:] = valid[:, 1:] & valid[:, :-1]
    ttc = np.full((A, T), TTC_MAX)
    ttc_valid = np.zeros((A, T), bool)
    for a in np.flatnonzero(is_vehicle):
        others = [b for b in range(A) if b != a]
        if not others:
            continue
        ob = np.array(others)
        t = time_to_collision(
            poses[a][None],
            vel[a][None],
            lengths[a],
            widths[a],
            poses[ob],
            vel[ob],
            lengths[ob, None],
            widths[ob, None],
            dt,
        )  # (A-1, T)
        ok = vvalid[ob] & vvalid[a][None]
        t = np.where(ok, t, np.inf)
        best = t.min(axis=0)
        ttc[a] = np.where(np.isfinite(best), best, TTC_MAX)
        ttc_valid[a] = ok.any(axis=0)
    return {
        "distance_to_nearest_object": FeatureSeries("distance_to_nearest_object", dist, valid & has_other),
        "collision": FeatureSeries("collision", collision, valid),
        "time_to_collision": FeatureSeries(
            "time_to_collision", ttc, ttc_valid, np.broadcast_to(is_vehicle[:, None], (A, T))
        ),
    }


def _stop_line_s(lane) -> float:
    return float(polyline_arclength(lane.points)[lane.signal.stop_line_index])


def map_features(poses, valid, map_data: MapData, is_vehicle) -> dict[str, FeatureSeries]:
    """Offroad flag, signed road-edge distance and red-light violations.

    The road-edge distance is negative inside the drivable area. A vehicle is
    assigned at each step to the nearest lane center within 2 m; it violates
    when it passes that lane's stop line during a red step.
    """
    poses = np.asarray(poses, float)
    valid = np.asarray(valid, bool)
    is_vehicle = np.asarray(is_vehicle, bool)
    A, T = poses.shape[:2]
    pts = poses[..., :2]
    inside = np.zeros((A, T), bool)
    dist = np.full((A, T), np.inf)
    for poly in map_data.drivable_polygons:
        inside |= points_in_polygon(pts, poly)
        dist = np.minimum(dist, distance_to_polygon_boundary(pts, poly))
    signed = np.where(inside, -dist, dist)

    lanes = map_data.lane_centers
    violation = np.zeros((A, T), bool)
    signal_applicable = any(l.signal is not None for l in lanes)
    if signal_applicable and lanes:
        s_all = np.zeros((len(lanes), A, T))
        lat_all = np.zeros((len(lanes), A, T))
        for i, lane in enumerate(lanes):
            s_all[i], lat_all[i] = polyline_project(pts, lane.points)
        nearest = np.argmin(lat_all, axis=0)  # (A, T)
        close = np.take_along_axis(lat_all, nearest[None], 0)[0] <= LANE_ASSIGN_DIST
        for i, lane in enumerate(lanes):
            if lane.signal is None:
                continue
            on = (nearest == i) & close & valid
            stay = on[:, 1:] & on[:, :-1]
            s_stop = _stop_line_s(lane)
            s = s_all[i]
            crossed = (s[:, :-1] < s_stop) & (s[:, 1:] >= s_stop)
            red = np.array([p == "red" for p in lane.signal.phase])[1:T]
            violation[:, 1:] |= stay & crossed & red[None, :]
    app = np.broadcast_to(is_vehicle[:, None] & signal_applicable, (A, T))
    return {
        "distance_to_road_edge": FeatureSeries("distance_to_road_edge", signed, valid),
        "offroad": FeatureSeries("offroad", ~inside, valid),
        "traffic_light_violation": FeatureSeries("traffic_light_violation", violation, valid, app),
    }


def scene_features(scenario: Scenario, poses, valid) -> dict[str, FeatureSeries]:
    """All ten features for one joint trajectory ``(A, T, 3)`` of ``scenario``'s agents."""
    lengths = np.array([m.length for m in scenario.metas])
    widths = np.array([m.width for m in scenario.metas])
    veh = np.array([m.kind == "vehicle" for m in scenario.metas])
    out = kinematic_features(poses, valid)
    out.update(interactive_features(poses, valid, lengths, widths, veh))
    out.update(map_features(poses, valid, scenario.map, veh))
    return out


def logged_features(scenario: Scenario) -> dict[str, FeatureSeries]:
    return scene_features(scenario, scenario.poses(), scenario.valid())


def stack_features(per_rollout: list[dict[str, FeatureSeries]]) -> dict[str, FeatureSeries]:
    """Stack per-rollout features along a new leading axis."""
    out = {}
    for name in per_rollout[0]:
        fs = [d[name] for d in per_rollout]
        app = None if fs[0].applicable is None else np.stack([np.broadcast_to(f.applicable, f.valid.shape) for f in fs])
        out[name] = FeatureSeries(name, np.stack([f.values for f in fs]), np.stack([f.valid for f in fs]), app)
    return out


# --------------------------------------------------------------------------
# scoring


def likelihood_elements(logged: FeatureSeries, simulated: FeatureSeries, spec: HistogramSpec | None = None):
    """Per-element likelihoods and their mask, both shaped like ``logged.values``."""
    spec = spec or HistogramSpec()
    lam = spec.smoothing
    lmask = logged.mask
    smask = simulated.mask
    if simulated.values.shape[1:] != logged.values.shape:
        raise ValueError("simulated features must be (R,) + logged shape")
    r_eff = smask.sum(axis=0)
    if logged.boolean:
        hits = (np.asarray(simulated.values, bool) & smask).sum(axis=0)
        p = (hits + lam) / (r_eff + 2 * lam)
        y = np.asarray(logged.values, bool)
        elem = np.where(y, p, 1.0 - p)
    else:
        bins = spec.bins[logged.name]
        li = bins.index(logged.values)
        si = bins.index(simulated.values)
        count = ((si == li[None]) & smask).sum(axis=0)
        elem = (count + lam) / (r_eff + lam * bins.count)
    return elem, lmask & (r_eff > 0)


def likelihood_score(logged: FeatureSeries, simulated: FeatureSeries, spec: HistogramSpec | None = None) -> float | None:
    """Mean element likelihood; ``None`` marks a feature with no valid elements."""
    elem, mask = likelihood_elements(logged, simulated, spec)
    if not mask.any():
        return None
    return math.fsum(elem[mask].tolist()) / int(mask.sum())


def realism_meta(sub_scores: dict, weights: dict | None = None) -> float:
    """Weighted sum of sub-scores; inapplicable (``None``) features are dropped and weights renormalized."""
    weights = WEIGHTS if weights is None else weights
    used = [(weights[k], v) for k, v in sub_scores.items() if v is not None and k in weights]
    total = math.fsum(w for w, _ in used)
    if total <= 0:
        raise ValueError("no applicable sub-scores")
    return math.fsum(w * v for w, v in used) / total


def ade(logged, logged_valid, sim, sim_valid) -> float:
    diff = np.asarray(sim, float)[..., :2] - np.asarray(logged, float)[..., :2]
    err = np.hypot(diff[..., 0], diff[..., 1])
    m = np.asarray(logged_valid, bool) & np.asarray(sim_valid, bool)
    if not m.any():
        return float("nan")
    return math.fsum(err[m].tolist()) / int(m.sum())


def min_ade(logged, logged_valid, rollouts, rollout_valid) -> float:
    """Minimum over rollouts of the mean displacement error on valid (agent, step) pairs."""
    rollouts = np.asarray(rollouts, float)
    rollout_valid = np.broadcast_to(rollout_valid, rollouts.shape[:-1])
    return min(ade(logged, logged_valid, rollouts[r], rollout_valid[r]) for r in range(len(rollouts)))


@dataclass
class MetricReport:
    scenario_id: str
    sub_scores: dict
    realism_meta: float
    min_ade: float
    n_scenarios: int = 1
    weights: dict = field(default_factory=lambda: dict(WEIGHTS))

    def row(self) -> dict:
        out = {"scenario_id": self.scenario_id}
        for k in FEATURES:
            v = self.sub_scores.get(k)
            out[COLUMNS[k]] = "n/a" if v is None else repr(float(v))
        out["Realism Meta"] = repr(float(self.realism_meta))
        out["minADE"] = repr(float(self.min_ade))
        return out

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "n_scenarios": self.n_scenarios,
            "sub_scores": {k: self.sub_scores.get(k) for k in FEATURES},
            "realism_meta": self.realism_meta,
            "min_ade": self.min_ade,
            "weights": self.weights,
        }


def score_scenario(
    scenario: Scenario,
    tracks,
    valid,
    spec: HistogramSpec | None = None,
    start: int = CURRENT_INDEX + 1,
    logged: dict | None = None,
) -> MetricReport:
    """Score ``R`` joint rollouts ``tracks (R, A, 91, 3)`` against the log of ``scenario``.

    ``logged`` may pass precomputed :func:`logged_features` of the scenario.
    """
    tracks = np.asarray(tracks, float)
    valid = np.broadcast_to(np.asarray(valid, bool), tracks.shape[:-1])
    sl = slice(start, None)
    logged_poses, logged_valid = scenario.poses(), scenario.valid()
    if logged is None:
        logged = logged_features(scenario)
    sim = stack_features([scene_features(scenario, tracks[r], valid[r]) for r in range(len(tracks))])
    scores = {}
    for name in FEATURES:
        lf, sf = logged[name], sim[name]
        lcut = FeatureSeries(name, lf.values[..., sl], lf.valid[..., sl], None if lf.applicable is None else lf.applicable[..., sl])
        scut = FeatureSeries(name, sf.values[..., sl], sf.valid[..., sl], None if sf.applicable is None else sf.applicable[..., sl])
        scores[name] = likelihood_score(lcut, scut, spec)
    meta = realism_meta(scores)
    made = min_ade(logged_poses[:, sl], logged_valid[:, sl], tracks[:, :, sl], valid[:, :, sl])
    return MetricReport(scenario.scenario_id, scores, meta, made)


def score_rollouts(scenario: Scenario, batch, spec: HistogramSpec | None = None) -> MetricReport:
    """:func:`score_scenario` for a :class:`~trafficrft.rollout.RolloutBatch`."""
    if batch.scenario_id != scenario.scenario_id:
        raise ValueError(f"rollouts of {batch.scenario_id!r} scored against {scenario.scenario_id!r}")
    return score_scenario(scenario, batch.tracks, batch.valid, spec)


def aggregate(reports: list[MetricReport]) -> MetricReport:
    """Scenario mean of every score; order independent (sorted, compensated sums)."""
    if not reports:
        raise ValueError("no reports to aggregate")
    reports = sorted(reports, key=lambda r: r.scenario_id)

    def mean(vals):
        vals = sorted(v for v in vals if v is not None)
        return math.fsum(vals) / len(vals) if vals else None

    subs = {k: mean(r.sub_scores.get(k) for r in reports) for k in FEATURES}
    return MetricReport(
        "mean",
        subs,
        mean(r.realism_meta for r in reports),
        mean(r.min_ade for r in reports),
        n_scenarios=len(reports),
    )


def report_csv(reports: list[MetricReport], include_mean: bool = True) -> str:
    rows = [r.row() for r in sorted(reports, key=lambda r: r.scenario_id)]
    if include_mean:
        rows.append(aggregate(reports).row())
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def report_json(reports: list[MetricReport]) -> str:
    agg = aggregate(reports)
    doc = {
        "aggregate": agg.to_dict(),
        "scenarios": [r.to_dict() for r in sorted(reports, key=lambda r: r.scenario_id)],
    }
    return json.dumps(doc, indent=2, sort_keys=True)
