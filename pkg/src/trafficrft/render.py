"""Static SVG rendering of a scene and (optionally) simulated rollouts.

Conventions: drivable area in grey, lane centers thin, signalized lanes in the
colour of their phase (style classes ``signal-red`` / ``signal-green``), logged
agents as translucent boxes, simulated agents as solid boxes, ego highlighted.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np

from .geometry import box_corners
from .scenario import CURRENT_INDEX, N_STEPS, Scenario

STYLE = """
.road{fill:#e4e4e4;stroke:#a0a0a0;stroke-width:0.3}
.lane{fill:none;stroke:#b8b8b8;stroke-width:0.25;stroke-dasharray:1 1}
.signal-red{fill:none;stroke:#d62728;stroke-width:0.6}
.signal-green{fill:none;stroke:#2ca02c;stroke-width:0.6}
.logged{fill:#1f77b4;fill-opacity:0.25;stroke:#1f77b4;stroke-width:0.15}
.logged-path{fill:none;stroke:#1f77b4;stroke-opacity:0.5;stroke-width:0.2;stroke-dasharray:0.6 0.4}
.sim{fill:#ff7f0e;fill-opacity:1;stroke:#7f3f00;stroke-width:0.15}
.sim-path{fill:none;stroke:#ff7f0e;stroke-opacity:0.6;stroke-width:0.2}
.ego{fill:#9467bd;stroke:#3d1f5c}
"""


class RenderError(ValueError):
    pass


def _pts(arr) -> str:
    return " ".join(f"{x:.3f},{y:.3f}" for x, y in np.asarray(arr)[:, :2])


def _bounds(scenario: Scenario, extra) -> tuple:
    pts = [np.asarray(p)[:, :2] for p in scenario.map.drivable_polygons]
    pts += [np.asarray(l.points) for l in scenario.map.lane_centers]
    pts.append(scenario.poses()[scenario.valid()][:, :2])
    pts += [np.asarray(e)[:, :2] for e in extra]
    allp = np.concatenate([p.reshape(-1, 2) for p in pts if np.size(p)])
    lo, hi = allp.min(0) - 5.0, allp.max(0) + 5.0
    return lo, hi


def _rollout_tracks(scenario: Scenario, rollouts) -> list[np.ndarray]:
    """``(A, 91, 3)`` arrays in scenario agent order, from records or a RolloutBatch."""
    out = []
    if rollouts is None:
        return out
    if hasattr(rollouts, "tracks"):
        ids = list(rollouts.agent_ids)
        recs = [
            {"rollout": r, "tracks": {str(a): rollouts.tracks[r, i] for i, a in enumerate(ids)}}
            for r in range(rollouts.n_rollouts)
        ]
    else:
        recs = [r for r in rollouts if r.get("scenario_id", scenario.scenario_id) == scenario.scenario_id]
    for rec in recs:
        tr = rec["tracks"]
        arr = []
        for m in scenario.metas:
            if str(m.agent_id) not in tr:
                raise RenderError(f"agent {m.agent_id} missing from rollout {rec.get('rollout', '?')}")
            arr.append(np.asarray(tr[str(m.agent_id)], dtype=float))
        out.append(np.stack(arr))
    return out


def _box(parent, pose, length, width, cls):
    ET.SubElement(parent, "polygon", {"class": cls, "points": _pts(box_corners(pose, length, width))})


def render_svg(scenario: Scenario, rollouts=None, step: int = N_STEPS - 1, ego: int | None = None, max_rollouts: int = 4) -> str:
    """SVG text of the map, logged agents and up to ``max_rollouts`` simulated rollouts at ``step``."""
    if not 0 <= step < N_STEPS:
        raise RenderError(f"step {step} outside [0, {N_STEPS - 1}]")
    sims = _rollout_tracks(scenario, rollouts)[:max_rollouts]
    ego_id = scenario.metas[0].agent_id if ego is None else ego
    if ego_id not in {m.agent_id for m in scenario.metas}:
        raise RenderError(f"ego agent {ego_id} not in scenario")
    lo, hi = _bounds(scenario, [s.reshape(-1, 3) for s in sims])
    w, h = hi - lo
    svg = ET.Element(
        "svg",
        {
            "xmlns": "http://www.w3.org/2000/svg",
            "viewBox": f"{lo[0]:.3f} {-hi[1]:.3f} {w:.3f} {h:.3f}",
            "width": f"{min(1200, 10 * w):.0f}",
            "height": f"{min(1200, 10 * w) * h / w:.0f}",
        },
    )
    ET.SubElement(svg, "title").text = f"{scenario.scenario_id} step {step}"
    ET.SubElement(svg, "style").text = STYLE
    g = ET.SubElement(svg, "g", {"transform": "scale(1,-1)"})

    for poly in scenario.map.drivable_polygons:
        ET.SubElement(g, "polygon", {"class": "road", "points": _pts(poly)})
    for lane in scenario.map.lane_centers:
        cls = "lane"
        if lane.signal is not None:
            cls = "signal-red" if lane.signal.phase[step] == "red" else "signal-green"
        ET.SubElement(g, "polyline", {"class": cls, "points": _pts(lane.points)})

    poses, valid = scenario.poses(), scenario.valid()
    for a, m in enumerate(scenario.metas):
        v = valid[a]
        if v.sum() > 1:
            ET.SubElement(g, "polyline", {"class": "logged-path", "points": _pts(poses[a][v])})
        if v[step]:
            cls = "logged ego" if m.agent_id == ego_id else "logged"
            _box(g, poses[a, step], m.length, m.width, cls)
    for sim in sims:
        for a, m in enumerate(scenario.metas):
            ET.SubElement(g, "polyline", {"class": "sim-path", "points": _pts(sim[a, CURRENT_INDEX:step + 1])})
            cls = "sim ego" if m.agent_id == ego_id else "sim"
            _box(g, sim[a, step], m.length, m.width, cls)
    ET.indent(svg)
    return ET.tostring(svg, encoding="unicode") + "\n"


def save_svg(path, scenario: Scenario, rollouts=None, **kw) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_svg(scenario, rollouts, **kw))
