"""Motion-token vocabulary (k-disks) and track <-> token conversion.

A motion token is the agent-local displacement ``(dx, dy, dheading)`` over one
token horizon of 5 steps (0.5 s). With the 91-step clock this yields 2 history
token steps (steps 0->5->10) and 16 future token steps (10->...->90).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import compose, relative, wrap_angle
from .scenario import CURRENT_INDEX, KINDS, N_STEPS, AgentTrack, Scenario

TOKEN_HORIZON = 5
HISTORY_TOKEN_STEPS = CURRENT_INDEX // TOKEN_HORIZON
FUTURE_TOKEN_STEPS = (N_STEPS - 1 - CURRENT_INDEX) // TOKEN_HORIZON
TOTAL_TOKEN_STEPS = HISTORY_TOKEN_STEPS + FUTURE_TOKEN_STEPS


def token_distance(a, b, heading_weight: float = 1.0):
    """``hypot(dx) + lambda * |wrap(dtheta)|`` between motions (or poses), broadcasting."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.hypot(a[..., 0] - b[..., 0], a[..., 1] - b[..., 1]) + heading_weight * np.abs(
        wrap_angle(a[..., 2] - b[..., 2])
    )


@dataclass(frozen=True, eq=False)
class Vocabulary:
    """Per-kind template motions plus the metric they were clustered under."""

    templates: dict
    disk_radius_eps: float
    heading_weight_lambda: float = 1.0
    token_horizon_steps: int = TOKEN_HORIZON

    def __post_init__(self):
        fixed = {}
        for kind in KINDS:
            arr = np.array(self.templates.get(kind, [[0.0, 0.0, 0.0]]), dtype=float).reshape(-1, 3)
            arr.flags.writeable = False
            fixed[kind] = arr
        object.__setattr__(self, "templates", fixed)

    def size(self, kind: str) -> int:
        return len(self.templates[kind])

    @property
    def max_size(self) -> int:
        return max(len(t) for t in self.templates.values())

    def to_dict(self) -> dict:
        return {
            "disk_radius_eps": self.disk_radius_eps,
            "heading_weight_lambda": self.heading_weight_lambda,
            "token_horizon_steps": self.token_horizon_steps,
            "templates": {k: self.templates[k].tolist() for k in KINDS},
        }

    @property
    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(
            {k: v for k, v in d["templates"].items()},
            float(d["disk_radius_eps"]),
            float(d.get("heading_weight_lambda", 1.0)),
            int(d.get("token_horizon_steps", TOKEN_HORIZON)),
        )


def save_vocab(vocab: Vocabulary, path) -> None:
    Path(path).write_text(json.dumps(vocab.to_dict(), sort_keys=True), encoding="utf-8")


def load_vocab(path) -> Vocabulary:
    return Vocabulary.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab_kdisks(segments, eps: float, max_size: int = 128, seed: int = 0, heading_weight: float = 1.0):
    """Greedy k-disks cover of local-frame motion segments.

    Segments are visited in a seeded random order; a segment becomes a new
    template when it is farther than ``eps`` from every template admitted so
    far. Returns the ``(n, 3)`` template array.
    """
    seg = np.asarray(segments, dtype=float).reshape(-1, 3)
    if len(seg) == 0:
        raise ValueError("segments must be non-empty")
    if eps <= 0:
        raise ValueError("eps must be positive")
    order = np.random.default_rng(seed).permutation(len(seg))
    templates = np.empty((min(max_size, len(seg)), 3))
    n = 0
    # running distance of every segment to its nearest admitted template
    nearest = np.full(len(seg), np.inf)
    for idx in order:
        if n >= max_size:
            break
        if nearest[idx] <= eps:
            continue
        templates[n] = seg[idx]
        n += 1
        nearest = np.minimum(nearest, token_distance(seg, seg[idx], heading_weight))
    return templates[:n].copy()


def track_segments(track: AgentTrack, horizon: int = TOKEN_HORIZON) -> np.ndarray:
    """Local-frame deltas between consecutive token boundaries with both ends valid."""
    poses = track.poses
    idx = np.arange(0, len(track) - horizon, horizon)
    ok = track.valid[idx] & track.valid[idx + horizon]
    return relative(poses[idx[ok]], poses[idx[ok] + horizon])


def build_vocab(
    scenarios: list[Scenario],
    eps: float = 0.5,
    max_size: int = 128,
    seed: int = 0,
    heading_weight: float = 1.0,
) -> Vocabulary:
    """Cluster the motion segments of every agent kind found in ``scenarios``."""
    per_kind: dict[str, list] = {k: [] for k in KINDS}
    for sc in scenarios:
        for meta, track in sc.agents:
            per_kind[meta.kind].append(track_segments(track))
    templates = {}
    for kind, chunks in per_kind.items():
        segs = np.concatenate(chunks) if chunks else np.zeros((0, 3))
        if len(segs) == 0:
            templates[kind] = [[0.0, 0.0, 0.0]]
            continue
        templates[kind] = build_vocab_kdisks(segs, eps, max_size, seed, heading_weight)
    return Vocabulary(templates, eps, heading_weight)


def nearest_token(delta, vocab: Vocabulary, kind: str):
    """Index of (and distance to) the closest template; ties go to the lowest index."""
    d = token_distance(vocab.templates[kind], np.asarray(delta, dtype=float), vocab.heading_weight_lambda)
    i = int(np.argmin(d))
    return i, float(d[i])


def nearest_tokens(deltas, templates, heading_weight: float = 1.0) -> np.ndarray:
    """Vectorised :func:`nearest_token` over leading dims of ``deltas``."""
    d = token_distance(np.asarray(deltas)[..., None, :], templates, heading_weight)
    return np.argmin(d, axis=-1)


@dataclass(frozen=True, eq=False)
class TokenSeq:
    agent_id: int
    anchor: np.ndarray
    indices: np.ndarray
    step_valid: np.ndarray


def tokenize(
    track: AgentTrack,
    vocab: Vocabulary,
    kind: str,
    mode: str = "rollout_anchored",
    agent_id: int = -1,
    start: int = CURRENT_INDEX,
) -> TokenSeq:
    """Tokenize the part of ``track`` from step ``start`` onwards.

    ``gt_anchored`` measures each delta in the logged local frame;
    ``rollout_anchored`` measures it from the pose reconstructed by the tokens
    chosen so far, so that detokenizing reproduces the reconstruction exactly.
    """
    h = vocab.token_horizon_steps
    n_tok = (len(track) - 1 - start) // h
    if n_tok < 1:
        raise ValueError("track too short: needs at least one full token horizon after start")
    if mode not in ("gt_anchored", "rollout_anchored"):
        raise ValueError(f"unknown tokenize mode {mode!r}")
    poses = track.poses
    bounds = start + h * np.arange(n_tok + 1)
    gt = poses[bounds]
    ok = track.valid[bounds]
    step_valid = ok[:-1] & ok[1:]
    templates = vocab.templates[kind]
    lam = vocab.heading_weight_lambda
    indices = np.zeros(n_tok, dtype=int)
    if mode == "gt_anchored":
        deltas = relative(gt[:-1], gt[1:])
        indices = np.where(step_valid, nearest_tokens(deltas, templates, lam), 0)
    else:
        cur = gt[0].copy()
        for j in range(n_tok):
            if not step_valid[j]:
                # reconstruction resumes from the log once it is valid again
                if ok[j + 1]:
                    cur = gt[j + 1].copy()
                continue
            k = int(nearest_tokens(relative(cur, gt[j + 1]), templates, lam))
            indices[j] = k
            cur = compose(cur, templates[k])
    return TokenSeq(agent_id, gt[0].copy(), indices, step_valid)


def detokenize(seq: TokenSeq, vocab: Vocabulary, kind: str, interpolate: bool = False) -> np.ndarray:
    """Poses reached by composing templates from the anchor.

    Returns ``(n+1, 3)`` token-rate poses, or ``(h*n+1, 3)`` 10 Hz poses with
    ``interpolate`` (linear in position, shortest-arc in heading).
    """
    templates = vocab.templates[kind]
    idx = np.asarray(seq.indices, dtype=int)
    if np.any(idx < 0) or np.any(idx >= len(templates)):
        raise ValueError("token index out of vocabulary bounds")
    poses = np.empty((len(idx) + 1, 3))
    poses[0] = seq.anchor
    for j, k in enumerate(idx):
        poses[j + 1] = compose(poses[j], templates[k])
    if not interpolate:
        return poses
    return interpolate_poses(poses, vocab.token_horizon_steps)


def interpolate_poses(poses, horizon: int = TOKEN_HORIZON) -> np.ndarray:
    """Upsample token-rate poses (``(..., n+1, 3)``) to the 10 Hz clock."""
    poses = np.asarray(poses, dtype=float)
    a, b = poses[..., :-1, :], poses[..., 1:, :]
    u = (np.arange(horizon) / horizon)[:, None]
    xy = a[..., None, :2] + u * (b[..., None, :2] - a[..., None, :2])
    dh = wrap_angle(b[..., 2] - a[..., 2])
    h = wrap_angle(a[..., None, 2] + u[:, 0] * dh[..., None])
    out = np.concatenate([xy, h[..., None]], axis=-1)
    out = out.reshape(poses.shape[:-2] + (-1, 3))
    return np.concatenate([out, poses[..., -1:, :]], axis=-2)
