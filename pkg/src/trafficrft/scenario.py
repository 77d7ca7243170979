"""Driving-scene data model, synthetic scene generator and JSON file I/O.

All tracks live on a fixed 10 Hz clock of 91 steps, with step 10 being the
"current" step: 11 history steps (current included) and 80 future steps.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    points_in_polygon,
    polygon_is_simple,
    wrap_angle,
)

N_STEPS = 91
CURRENT_INDEX = 10
DT = 0.1
MAX_AGENTS = 128
KINDS = ("vehicle", "pedestrian", "cyclist")
PHASES = ("green", "red")
TEMPLATES = ("straight", "curve", "four_way_intersection")

LANE_WIDTH = 3.5
MAX_SPEED = 30.0


class ScenarioError(ValueError):
    """Base class for scenario problems."""


class ScenarioParseError(ScenarioError):
    """The file does not match the documented JSON schema."""

    def __init__(self, field_path: str, reason: str):
        self.field = field_path
        super().__init__(f"{field_path}: {reason}")


class ScenarioValidationError(ScenarioError):
    """The scenario parsed but breaks one or more invariants."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])


@dataclass(frozen=True)
class AgentMeta:
    agent_id: int
    kind: str
    length: float
    width: float


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class AgentTrack:
    """Per-step states of one agent; arrays of length 91."""

    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        for name in ("x", "y", "heading", "speed"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "valid", _frozen(self.valid, dtype=bool))

    @property
    def poses(self) -> np.ndarray:
        return np.stack([self.x, self.y, self.heading], axis=-1)

    def __len__(self) -> int:
        return len(self.x)

    @classmethod
    def from_poses(cls, poses, valid=None, dt: float = DT) -> "AgentTrack":
        """Build a track from a ``(n, 3)`` pose array, deriving speed by finite differences."""
        poses = np.asarray(poses, dtype=float)
        n = len(poses)
        valid = np.ones(n, bool) if valid is None else np.asarray(valid, bool)
        disp = np.linalg.norm(np.diff(poses[:, :2], axis=0), axis=-1) / dt
        speed = np.zeros(n)
        if n > 1:
            speed[1:] = disp
            speed[0] = disp[0]
        speed[~valid] = 0.0
        return cls(poses[:, 0], poses[:, 1], wrap_angle(poses[:, 2]), speed, valid)


@dataclass(frozen=True, eq=False)
class Signal:
    stop_line_index: int
    phase: tuple

    @property
    def red(self) -> np.ndarray:
        return np.array([p == "red" for p in self.phase], dtype=bool)


@dataclass(frozen=True, eq=False)
class LaneCenter:
    points: np.ndarray
    signal: Signal | None = None

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen(self.points).reshape(-1, 2))


@dataclass(frozen=True, eq=False)
class MapData:
    lane_centers: tuple = ()
    drivable_polygons: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "lane_centers", tuple(self.lane_centers))
        object.__setattr__(
            self,
            "drivable_polygons",
            tuple(_frozen(p).reshape(-1, 2) for p in self.drivable_polygons),
        )

    @property
    def signalized_lanes(self) -> list[int]:
        return [i for i, lc in enumerate(self.lane_centers) if lc.signal is not None]


@dataclass(frozen=True, eq=False)
class Scenario:
    scenario_id: str
    map: MapData
    agents: tuple
    current_index: int = CURRENT_INDEX

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple((m, t) for m, t in self.agents))

    @property
    def metas(self) -> list[AgentMeta]:
        return [m for m, _ in self.agents]

    @property
    def tracks(self) -> list[AgentTrack]:
        return [t for _, t in self.agents]

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def poses(self) -> np.ndarray:
        """All agent poses, shape ``(n_agents, n_steps, 3)``."""
        return np.stack([t.poses for t in self.tracks])

    def valid(self) -> np.ndarray:
        return np.stack([t.valid for t in self.tracks])


# --------------------------------------------------------------------------
# validation


def _polygon_closed(poly: np.ndarray) -> bool:
    return len(poly) >= 4 and np.allclose(poly[0], poly[-1])


def validate(scenario: Scenario) -> list[str]:
    """Return a description of every violated invariant (empty when valid)."""
    out: list[str] = []
    n = scenario.n_agents
    if not 1 <= n <= MAX_AGENTS:
        out.append(f"agents: count {n} out of range [1, {MAX_AGENTS}]")
    if scenario.current_index != CURRENT_INDEX:
        out.append(f"current_index: must be {CURRENT_INDEX}")
    seen: set[int] = set()
    for i, (meta, track) in enumerate(scenario.agents):
        where = f"agents[{i}]"
        if meta.agent_id in seen:
            out.append(f"{where}.meta.id: duplicate agent_id {meta.agent_id}")
        seen.add(meta.agent_id)
        if meta.kind not in KINDS:
            out.append(f"{where}.meta.kind: unknown kind {meta.kind!r}")
        if not (meta.length > 0 and meta.width > 0):
            out.append(f"{where}.meta: dimensions must be positive")
        elif meta.length < meta.width:
            out.append(f"{where}.meta: length < width")
        if len(track) != N_STEPS:
            out.append(f"{where}.track: track length != {N_STEPS}")
            continue
        v = track.valid
        if not np.all(np.isfinite(track.x[v]) & np.isfinite(track.y[v])):
            out.append(f"{where}.track: non-finite position")
        h = track.heading[v]
        if np.any(~((h > -np.pi) & (h <= np.pi))):
            out.append(f"{where}.track.heading: not wrapped into (-pi, pi]")
        if np.any(track.speed[v] < 0):
            out.append(f"{where}.track.speed: negative speed")
        if not v[scenario.current_index]:
            out.append(f"{where}.track.valid: agent invalid at current_index")
    for j, poly in enumerate(scenario.map.drivable_polygons):
        if not _polygon_closed(poly):
            out.append(f"map.drivable_polygons[{j}]: polygon not closed")
        elif not polygon_is_simple(poly):
            out.append(f"map.drivable_polygons[{j}]: polygon self-intersects")
    for j, lane in enumerate(scenario.map.lane_centers):
        if len(lane.points) < 2:
            out.append(f"map.lane_centers[{j}].points: fewer than 2 points")
        sig = lane.signal
        if sig is None:
            continue
        if not 0 <= sig.stop_line_index < len(lane.points):
            out.append(f"map.lane_centers[{j}].signal.stop_line_index: out of bounds")
        if len(sig.phase) != N_STEPS:
            out.append(f"map.lane_centers[{j}].signal.phase: length != {N_STEPS}")
        if any(p not in PHASES for p in sig.phase):
            out.append(f"map.lane_centers[{j}].signal.phase: unknown phase value")
    return out


# --------------------------------------------------------------------------
# JSON I/O


def scenario_to_dict(scenario: Scenario) -> dict:
    lanes = []
    for lane in scenario.map.lane_centers:
        d = {"points": lane.points.tolist()}
        if lane.signal is not None:
            d["signal"] = {
                "stop_line_index": int(lane.signal.stop_line_index),
                "phase": list(lane.signal.phase),
            }
        lanes.append(d)
    agents = []
    for meta, track in scenario.agents:
        agents.append(
            {
                "meta": {
                    "id": int(meta.agent_id),
                    "kind": meta.kind,
                    "length": float(meta.length),
                    "width": float(meta.width),
                },
                "track": [
                    {
                        "x": float(track.x[t]),
                        "y": float(track.y[t]),
                        "heading": float(track.heading[t]),
                        "speed": float(track.speed[t]),
                        "valid": bool(track.valid[t]),
                    }
                    for t in range(len(track))
                ],
            }
        )
    return {
        "scenario_id": scenario.scenario_id,
        "map": {
            "lane_centers": lanes,
            "drivable_polygons": [p.tolist() for p in scenario.map.drivable_polygons],
        },
        "agents": agents,
    }


def dumps_scenario(scenario: Scenario) -> str:
    return json.dumps(scenario_to_dict(scenario), separators=(",", ":"))


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(dumps_scenario(scenario), encoding="utf-8")


def _get(d, key, where):
    if not isinstance(d, dict) or key not in d:
        raise ScenarioParseError(where + "." + key if where else key, "missing field")
    return d[key]


def _number(v, where) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioParseError(where, "expected a number")
    return float(v)


def _points(v, where) -> np.ndarray:
    if not isinstance(v, list):
        raise ScenarioParseError(where, "expected a list of [x, y] points")
    for k, p in enumerate(v):
        if not isinstance(p, list) or len(p) != 2:
            raise ScenarioParseError(f"{where}[{k}]", "expected [x, y]")
        _number(p[0], f"{where}[{k}][0]")
        _number(p[1], f"{where}[{k}][1]")
    return np.array(v, dtype=float).reshape(-1, 2)


def scenario_from_dict(data: dict) -> Scenario:
    """Parse the schema without checking invariants (see :func:`validate`)."""
    if not isinstance(data, dict):
        raise ScenarioParseError("<root>", "expected an object")
    sid = _get(data, "scenario_id", "")
    if not isinstance(sid, str):
        raise ScenarioParseError("scenario_id", "expected a string")
    m = _get(data, "map", "")
    lanes_raw = _get(m, "lane_centers", "map")
    if not isinstance(lanes_raw, list):
        raise ScenarioParseError("map.lane_centers", "expected a list")
    lanes = []
    for j, lr in enumerate(lanes_raw):
        where = f"map.lane_centers[{j}]"
        pts = _points(_get(lr, "points", where), where + ".points")
        sig = None
        if "signal" in lr and lr["signal"] is not None:
            sr = lr["signal"]
            idx = _get(sr, "stop_line_index", where + ".signal")
            if isinstance(idx, bool) or not isinstance(idx, int):
                raise ScenarioParseError(where + ".signal.stop_line_index", "expected an integer")
            phase = _get(sr, "phase", where + ".signal")
            if not isinstance(phase, list) or not all(isinstance(p, str) for p in phase):
                raise ScenarioParseError(where + ".signal.phase", "expected a list of strings")
            sig = Signal(idx, tuple(phase))
        lanes.append(LaneCenter(pts, sig))
    polys_raw = _get(m, "drivable_polygons", "map")
    if not isinstance(polys_raw, list):
        raise ScenarioParseError("map.drivable_polygons", "expected a list")
    polys = [_points(p, f"map.drivable_polygons[{j}]") for j, p in enumerate(polys_raw)]

    agents_raw = _get(data, "agents", "")
    if not isinstance(agents_raw, list):
        raise ScenarioParseError("agents", "expected a list")
    agents = []
    for i, ar in enumerate(agents_raw):
        where = f"agents[{i}]"
        mr = _get(ar, "meta", where)
        aid = _get(mr, "id", where + ".meta")
        if isinstance(aid, bool) or not isinstance(aid, int):
            raise ScenarioParseError(where + ".meta.id", "expected an integer")
        kind = _get(mr, "kind", where + ".meta")
        if not isinstance(kind, str):
            raise ScenarioParseError(where + ".meta.kind", "expected a string")
        meta = AgentMeta(
            aid,
            kind,
            _number(_get(mr, "length", where + ".meta"), where + ".meta.length"),
            _number(_get(mr, "width", where + ".meta"), where + ".meta.width"),
        )
        tr = _get(ar, "track", where)
        if not isinstance(tr, list):
            raise ScenarioParseError(where + ".track", "expected a list")
        cols = {k: [] for k in ("x", "y", "heading", "speed")}
        valid = []
        for t, st in enumerate(tr):
            sw = f"{where}.track[{t}]"
            for k in cols:
                cols[k].append(_number(_get(st, k, sw), f"{sw}.{k}"))
            v = _get(st, "valid", sw)
            if not isinstance(v, bool):
                raise ScenarioParseError(sw + ".valid", "expected a boolean")
            valid.append(v)
        agents.append((meta, AgentTrack(cols["x"], cols["y"], cols["heading"], cols["speed"], valid)))
    return Scenario(sid, MapData(lanes, polys), agents)


def load_scenario(path) -> Scenario:
    """Read and validate one scenario file."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioParseError("<root>", f"invalid JSON ({exc.msg})") from exc
    scenario = scenario_from_dict(data)
    problems = validate(scenario)
    if problems:
        raise ScenarioValidationError(problems)
    return scenario


def load_dataset(directory) -> list[Scenario]:
    """Load every ``*.json`` scenario in a directory, sorted by file name."""
    files = sorted(Path(directory).glob("*.json"))
    return [load_scenario(f) for f in files]


def scenarios_close(a: Scenario, b: Scenario, atol: float = 1e-9) -> bool:
    """Field-by-field comparison with an absolute tolerance on numbers."""
    if a.scenario_id != b.scenario_id or a.n_agents != b.n_agents:
        return False
    if len(a.map.lane_centers) != len(b.map.lane_centers):
        return False
    for la, lb in zip(a.map.lane_centers, b.map.lane_centers):
        if la.points.shape != lb.points.shape or not np.allclose(la.points, lb.points, atol=atol, rtol=0):
            return False
        if (la.signal is None) != (lb.signal is None):
            return False
        if la.signal is not None and (
            la.signal.stop_line_index != lb.signal.stop_line_index or la.signal.phase != lb.signal.phase
        ):
            return False
    if len(a.map.drivable_polygons) != len(b.map.drivable_polygons):
        return False
    for pa, pb in zip(a.map.drivable_polygons, b.map.drivable_polygons):
        if pa.shape != pb.shape or not np.allclose(pa, pb, atol=atol, rtol=0):
            return False
    for (ma, ta), (mb, tb) in zip(a.agents, b.agents):
        if ma != mb or not np.array_equal(ta.valid, tb.valid):
            return False
        for k in ("x", "y", "heading", "speed"):
            if not np.allclose(getattr(ta, k), getattr(tb, k), atol=atol, rtol=0):
                return False
    return True


# --------------------------------------------------------------------------
# synthetic generator


class _Path:
    """Dense polyline with arc-length lookup of position and tangent heading."""

    def __init__(self, points, spacing: float = 0.5):
        pts = np.asarray(points, dtype=float)
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=-1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        n = max(int(math.ceil(s[-1] / spacing)), 1) + 1
        self.s = np.linspace(0.0, s[-1], n)
        self.xy = np.stack([np.interp(self.s, s, pts[:, 0]), np.interp(self.s, s, pts[:, 1])], -1)
        d = np.gradient(self.xy, axis=0)
        self.theta = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
        self.length = float(self.s[-1])

    def at(self, s):
        s = np.clip(s, 0.0, self.length)
        x = np.interp(s, self.s, self.xy[:, 0])
        y = np.interp(s, self.s, self.xy[:, 1])
        th = np.interp(s, self.s, self.theta)
        return x, y, th

    def offset(self, lateral: float) -> np.ndarray:
        nx, ny = -np.sin(self.theta), np.cos(self.theta)
        return self.xy + lateral * np.stack([nx, ny], -1)


def _arc(center, radius, a0, a1, n=40) -> np.ndarray:
    a = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)], -1)


def _road_polygon(ref: _Path, half_width: float, step: int = 8) -> np.ndarray:
    idx = np.unique(np.concatenate([np.arange(0, len(ref.s), step), [len(ref.s) - 1]]))
    left = ref.offset(half_width)[idx]
    right = ref.offset(-half_width)[idx]
    ring = np.vstack([right, left[::-1]])
    return np.vstack([ring, ring[:1]])


@dataclass
class _AgentPlan:
    meta: AgentMeta
    route: _Path
    s0: float
    v0: float
    v_init: float
    lane_offset: float
    lane_change: tuple | None = None  # (start_time, delta_offset, duration)
    stop_s: float | None = None
    lane_signal: int | None = None
    noise: list = field(default_factory=list)


def _sample_dims(rng, kind):
    if kind == "cyclist":
        return 1.8, 0.7
    length = float(rng.uniform(4.0, 5.2))
    width = float(rng.uniform(1.8, 2.1))
    return length, width


def _plan_lanes(rng, n_agents, lanes, allow_cyclists, lane_change_targets=None):
    """Distribute agents round-robin over lanes, spaced along each lane."""
    per_lane: list[list[int]] = [[] for _ in lanes]
    for i in range(n_agents):
        per_lane[i % len(lanes)].append(i)
    plans: dict[int, tuple] = {}
    for li, members in enumerate(per_lane):
        s = 5.0 + float(rng.uniform(0.0, 5.0))
        for i in members:
            kind = "cyclist" if allow_cyclists and rng.random() < 0.15 else "vehicle"
            plans[i] = (li, s, kind)
            s += float(rng.uniform(14.0, 26.0))
    return plans


def _simulate(rng, plans: list[_AgentPlan], phases_red: list[np.ndarray]) -> list[AgentTrack]:
    """Roll logged trajectories forward with IDM longitudinal control and lateral drift."""
    n = len(plans)
    s = np.array([p.s0 for p in plans])
    v = np.array([p.v_init for p in plans])
    lat_noise = np.zeros(n)
    out_x = np.zeros((n, N_STEPS))
    out_y = np.zeros((n, N_STEPS))
    out_h = np.zeros((n, N_STEPS))
    out_v = np.zeros((n, N_STEPS))
    lengths = np.array([p.meta.length for p in plans])
    a_max, b_comf, s_min, headway = 1.5, 2.5, 2.0, 1.2
    prev_lat = None

    def lateral(t, i):
        p = plans[i]
        lat = p.lane_offset + lat_noise[i]
        if p.lane_change is not None:
            t0, dl, dur = p.lane_change
            u = np.clip((t * DT - t0) / dur, 0.0, 1.0)
            lat += dl * (3 * u**2 - 2 * u**3)
        return lat

    for t in range(N_STEPS):
        lat = np.array([lateral(t, i) for i in range(n)])
        xs, ys, ths = np.zeros(n), np.zeros(n), np.zeros(n)
        for i, p in enumerate(plans):
            x, y, th = p.route.at(s[i])
            xs[i] = x - math.sin(th) * lat[i]
            ys[i] = y + math.cos(th) * lat[i]
            ths[i] = th
        if prev_lat is None:
            dlat = np.zeros(n)
        else:
            dlat = lat - prev_lat
        ds = np.maximum(v * DT, 0.5)
        heading = wrap_angle(ths + np.arctan(dlat / ds))
        out_x[:, t], out_y[:, t], out_h[:, t], out_v[:, t] = xs, ys, heading, v
        prev_lat = lat

        # leader gaps from a forward cone in each agent's frame
        dx = xs[None, :] - xs[:, None]
        dy = ys[None, :] - ys[:, None]
        c, sn = np.cos(heading)[:, None], np.sin(heading)[:, None]
        fwd = c * dx + sn * dy
        side = -sn * dx + c * dy
        dpsi = np.abs(wrap_angle(heading[None, :] - heading[:, None]))
        cand = (fwd > 0) & (np.abs(side) < 2.2) & (dpsi < np.pi / 3)
        np.fill_diagonal(cand, False)
        gap = np.where(cand, fwd - 0.5 * (lengths[:, None] + lengths[None, :]), np.inf)
        lead = np.argmin(gap, axis=1)
        g = gap[np.arange(n), lead]
        v_lead = np.where(np.isfinite(g), v[lead] * np.cos(dpsi[np.arange(n), lead]), v)

        # red signals act as a stationary obstacle at the stop line when stoppable
        for i, p in enumerate(plans):
            if p.stop_s is None or p.lane_signal is None or not phases_red[p.lane_signal][t]:
                continue
            to_line = p.stop_s - (s[i] + 0.5 * lengths[i])
            if 0.0 < to_line and v[i] ** 2 / (2 * 4.0) < to_line + 1.0 and to_line < g[i]:
                g[i] = to_line
                v_lead[i] = 0.0

        g_eff = np.maximum(g, 0.1)
        s_star = s_min + v * headway + v * (v - v_lead) / (2 * math.sqrt(a_max * b_comf))
        s_star = np.maximum(s_star, s_min)
        v0 = np.array([p.v0 for p in plans])
        acc = a_max * (1 - (v / v0) ** 4 - np.where(np.isfinite(g), (s_star / g_eff) ** 2, 0.0))
        acc = acc + rng.normal(0.0, 0.25, n)
        acc = np.clip(acc, -6.0, 2.0)
        v_new = np.clip(v + acc * DT, 0.0, MAX_SPEED)
        s = s + 0.5 * (v + v_new) * DT
        v = v_new
        lat_noise = np.clip(lat_noise - 0.5 * lat_noise * DT + 0.12 * math.sqrt(DT) * rng.normal(size=n), -0.4, 0.4)

    tracks = []
    for i in range(n):
        tracks.append(AgentTrack(out_x[i], out_y[i], out_h[i], out_v[i], np.ones(N_STEPS, bool)))
    return tracks


def _gen_corridor(rng, n_agents, curve: bool):
    per_lane = math.ceil(n_agents / 2)
    spawn_extent = 15.0 + per_lane * 26.0
    tail = 320.0
    if curve:
        lead_in = spawn_extent * 0.5 + 40.0
        radius = 60.0
        ref_pts = np.vstack(
            [
                np.array([[0.0, 0.0], [lead_in, 0.0]]),
                _arc((lead_in, radius), radius, -np.pi / 2, 0.0, 60)[1:],
                np.array([[lead_in + radius, radius + spawn_extent + tail]]),
            ]
        )
    else:
        ref_pts = np.array([[0.0, 0.0], [spawn_extent + tail, 0.0]])
    ref = _Path(ref_pts)
    polygon = _road_polygon(ref, LANE_WIDTH)
    lanes_xy = [ref.offset(-LANE_WIDTH / 2), ref.offset(LANE_WIDTH / 2)]
    lanes = [_Path(pts, spacing=0.5) for pts in lanes_xy]
    lane_centers = [LaneCenter(pts[::8]) for pts in lanes_xy]

    slots = _plan_lanes(rng, n_agents, lanes, allow_cyclists=True)
    plans = []
    for i in range(n_agents):
        li, s0, kind = slots[i]
        length, width = _sample_dims(rng, kind)
        offset = -LANE_WIDTH / 2 if li == 0 else LANE_WIDTH / 2
        if kind == "cyclist":
            v0 = float(rng.uniform(4.0, 7.0))
            offset -= 0.6 if li == 0 else -0.6
            change = None
        else:
            v0 = float(rng.uniform(8.0, 18.0))
            change = None
            if rng.random() < 0.3:
                change = (float(rng.uniform(1.0, 6.0)), -2 * offset, float(rng.uniform(3.0, 5.0)))
        plans.append(
            _AgentPlan(
                AgentMeta(i, kind, length, width),
                ref,
                s0,
                v0,
                v0 * float(rng.uniform(0.6, 1.0)),
                offset,
                change,
            )
        )
    return MapData(lane_centers, [polygon]), plans, []


def _gen_intersection(rng, n_agents):
    w = LANE_WIDTH
    per_approach = math.ceil(n_agents / 4)
    arm = max(200.0, 30.0 + per_approach * 26.0)
    chamfer = 8.0
    lane_off = w / 2
    # stop lines sit upstream of where right-turn connectors branch off
    stop = lane_off + chamfer + 3.0

    # plus-shaped drivable region with chamfered inner corners
    poly = np.array(
        [
            [arm, -w],
            [arm, w],
            [w + chamfer, w],
            [w, w + chamfer],
            [w, arm],
            [-w, arm],
            [-w, w + chamfer],
            [-w - chamfer, w],
            [-arm, w],
            [-arm, -w],
            [-w - chamfer, -w],
            [-w, -w - chamfer],
            [-w, -arm],
            [w, -arm],
            [w, -w - chamfer],
            [w + chamfer, -w],
        ]
    )
    poly = np.vstack([poly, poly[:1]])

    # through lanes: eastbound, northbound, westbound, southbound (rotations of eastbound)
    through = []
    for k in range(4):
        c, s = math.cos(k * np.pi / 2), math.sin(k * np.pi / 2)
        rot = np.array([[c, -s], [s, c]])
        base = np.array([[-arm, -lane_off], [arm, -lane_off]])
        through.append(base @ rot.T)

    g_switch = int(rng.integers(15, 70))
    clearance = 20
    red_a = np.array([t >= g_switch for t in range(N_STEPS)])
    red_b = np.array([t < g_switch + clearance for t in range(N_STEPS)])
    if rng.random() < 0.5:
        red_a, red_b = red_b, red_a
    phases = [red_a, red_b, red_a, red_b]

    lane_centers = []
    lane_paths = []
    stop_s = []
    for k in range(4):
        pts = through[k]
        dense = _Path(pts, spacing=1.0)
        lane_paths.append(dense)
        sample = dense.xy[::4]
        s_line = arm - stop
        stop_idx = int(np.argmin(np.abs(dense.s[::4] - s_line)))
        s_line = float(dense.s[::4][stop_idx])
        stop_s.append(s_line)
        phase = tuple("red" if r else "green" for r in phases[k])
        lane_centers.append(LaneCenter(sample, Signal(stop_idx, phase)))

    # right-turn connectors, one per corner
    r = chamfer
    turn_paths = []
    for k in range(4):
        c, s = math.cos(k * np.pi / 2), math.sin(k * np.pi / 2)
        rot = np.array([[c, -s], [s, c]])
        center = np.array([-lane_off - r, -lane_off - r])
        arc = _arc(center, r, np.pi / 2, 0.0, 24)
        arc = arc @ rot.T
        lane_centers.append(LaneCenter(arc))
        # full route: approach lane k up to the arc, arc, then the exit lane
        exit_dir = np.array([0.0, -1.0]) @ rot.T
        route = np.vstack([through[k][:1], arc, arc[-1] + exit_dir * (arm + 10.0)])
        turn_paths.append(_Path(route, spacing=0.5))

    per: list[list[int]] = [[] for _ in range(4)]
    for i in range(n_agents):
        per[i % 4].append(i)
    plans = []
    for k in range(4):
        s_pos = arm - stop - 8.0 - float(rng.uniform(0.0, 20.0))
        for i in per[k]:
            length, width = _sample_dims(rng, "vehicle")
            v0 = float(rng.uniform(8.0, 15.0))
            turn = rng.random() < 0.3
            route = turn_paths[k] if turn else lane_paths[k]
            plans.append(
                _AgentPlan(
                    AgentMeta(i, "vehicle", length, width),
                    route,
                    max(s_pos, 2.0),
                    v0,
                    v0 * float(rng.uniform(0.5, 1.0)),
                    0.0,
                    None,
                    stop_s[k],
                    k,
                )
            )
            s_pos -= float(rng.uniform(14.0, 26.0))
    plans.sort(key=lambda p: p.meta.agent_id)
    return MapData(lane_centers, [poly]), plans, phases


def generate_synthetic(template: str, n_agents: int, seed: int) -> Scenario:
    """Deterministic synthetic scene with kinematically simulated logged tracks."""
    if template not in TEMPLATES:
        raise ValueError(f"unknown template {template!r}; expected one of {TEMPLATES}")
    if isinstance(n_agents, bool) or not isinstance(n_agents, (int, np.integer)) or not 1 <= n_agents <= MAX_AGENTS:
        raise ValueError(f"agents out of range: n_agents must be in [1, {MAX_AGENTS}], got {n_agents}")
    rng = np.random.default_rng([int(seed), TEMPLATES.index(template), int(n_agents)])
    if template == "four_way_intersection":
        map_data, plans, phases = _gen_intersection(rng, int(n_agents))
    else:
        map_data, plans, phases = _gen_corridor(rng, int(n_agents), curve=template == "curve")
    tracks = _simulate(rng, plans, phases)
    agents = [(p.meta, tr) for p, tr in zip(plans, tracks)]
    return Scenario(f"{template}-{seed}-{n_agents}", map_data, agents)


def generate_dataset(
    out_dir, count: int, seed: int, template: str | None = None, agents: int | tuple = (4, 8)
) -> list[Path]:
    """Write ``count`` scenarios named ``<seed>_<index>.json`` into ``out_dir``.

    ``template=None`` cycles through all templates; ``agents`` is either a fixed
    count or an inclusive ``(low, high)`` range sampled per scenario.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(int(seed))
    paths = []
    for i in range(count):
        tpl = template or TEMPLATES[i % len(TEMPLATES)]
        n = agents if isinstance(agents, int) else int(rng.integers(agents[0], agents[1] + 1))
        sc = generate_synthetic(tpl, n, int(seed) * 100_003 + i)
        sc = Scenario(f"{seed}_{i}", sc.map, sc.agents)
        p = out / f"{seed}_{i}.json"
        save_scenario(sc, p)
        paths.append(p)
    return paths


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("TRAFFICRFT_WORKERS", "1")))
    except ValueError:
        return 1
