"""Next-token motion policy: encoders, attention blocks, losses and Adam.

Parameters are a plain ``dict[str, np.ndarray]`` (float64). The forward pass
and reverse-mode gradients run through torch in float64; everything crossing
the module boundary is numpy.

Per block, in order:

* temporal self-attention over each agent's own token steps (causal),
* map-to-agent cross-attention to the ``neighbor_k`` nearest map tokens,
* agent-to-agent self-attention within a token step, with relative-pose
  features added to keys and values,
* a GELU feed-forward layer.

All geometric inputs are expressed in the querying agent's local frame and no
agent-index encoding is used, so permuting agents permutes the outputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import relative
from .scenario import KINDS, MAX_AGENTS, Scenario
from .tokenizer import FUTURE_TOKEN_STEPS, HISTORY_TOKEN_STEPS, TOKEN_HORIZON

MAP_KINDS = ("lane", "edge", "signal_green", "signal_red")
F_DELTA = 3
F_REL = 5
F_MAP = 5 + len(MAP_KINDS)
REL_SCALE = 30.0
DELTA_SCALE = 5.0
NEG = -1e9
MAP_SEGMENT_MAX = 5.0


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_sizes: tuple = (65, 1, 10)
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    map_token_count: int = 2048
    neighbor_k: int = 16
    max_agents: int = MAX_AGENTS
    history_token_steps: int = HISTORY_TOKEN_STEPS
    future_token_steps: int = FUTURE_TOKEN_STEPS
    ffn_mult: int = 2

    def __post_init__(self):
        object.__setattr__(self, "vocab_sizes", tuple(int(v) for v in self.vocab_sizes))
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        if len(self.vocab_sizes) != len(KINDS) or min(self.vocab_sizes) < 1:
            raise ModelError("vocab_sizes needs one positive size per agent kind")

    @property
    def vocab_max(self) -> int:
        return max(self.vocab_sizes)

    @property
    def total_steps(self) -> int:
        return self.history_token_steps + self.future_token_steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab_sizes"] = list(self.vocab_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "vocab_sizes": tuple(d["vocab_sizes"])})


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, V, T = cfg.d_model, cfg.vocab_max, cfg.total_steps
    f = cfg.ffn_mult * d
    shapes = {
        # one embedding row per (kind, token) plus BOS and UNK
        "tok_emb": (len(KINDS) * V + 2, d),
        "delta_w": (F_DELTA, d),
        "kind_emb": (len(KINDS), d),
        "time_emb": (T, d),
    }
    for b in range(cfg.n_blocks):
        p = f"block{b}."
        for ln in ("ln_t", "ln_m", "ln_a", "ln_f"):
            shapes[p + ln + ".g"] = (d,)
            shapes[p + ln + ".b"] = (d,)
        for att in ("tmp", "map", "agt"):
            for w in ("wq", "wk", "wv", "wo"):
                shapes[f"{p}{att}.{w}"] = (d, d)
        shapes[p + "map.in_w"] = (F_MAP, d)
        shapes[p + "map.in_b"] = (d,)
        shapes[p + "agt.rel_k"] = (F_REL, d)
        shapes[p + "agt.rel_v"] = (F_REL, d)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
    shapes["ln_out.g"] = (d,)
    shapes["ln_out.b"] = (d,)
    shapes["head.w"] = (d, V)
    shapes["head.b"] = (V,)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form size of :func:`init_params` for ``cfg``.

    ``(3V+2)d + 3d + 3d + Td + blocks * (8d + 12d^2 + F_map d + d + 2 F_rel d
    + 2 m d^2 + m d + d) + 2d + dV + V`` with ``m`` the FFN multiplier.
    """
    d, V, T, m = cfg.d_model, cfg.vocab_max, cfg.total_steps, cfg.ffn_mult
    per_block = 8 * d + 12 * d * d + F_MAP * d + d + 2 * F_REL * d + 2 * m * d * d + m * d + d
    return (3 * V + 2) * d + 3 * d + 3 * d + T * d + cfg.n_blocks * per_block + 2 * d + d * V + V


@dataclass(eq=False)
class Parameters:
    arrays: dict
    seed: int = 0

    @property
    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "Parameters":
        return Parameters({k: v.copy() for k, v in self.arrays.items()}, self.seed)

    def __getitem__(self, name):
        return self.arrays[name]


def init_params(cfg: ModelConfig, seed: int = 0) -> Parameters:
    """Scaled uniform init; every value lies in [-1, 1]."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".g"):
            arrays[name] = np.ones(shape)
        elif name.endswith((".b", "_b", ".b1", ".b2")):
            arrays[name] = np.zeros(shape)
        elif name in ("tok_emb", "kind_emb", "time_emb"):
            arrays[name] = rng.uniform(-0.1, 0.1, shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            if name == "head.w":
                bound *= 0.1  # near-uniform initial token distribution
            arrays[name] = rng.uniform(-bound, bound, shape)
    return Parameters(arrays, seed)


# --------------------------------------------------------------------------
# map tokens and batch assembly


@dataclass(frozen=True, eq=False)
class MapTokens:
    """Map polyline segments; ``kind_by_step`` has one column per 10 Hz step."""

    midpoints: np.ndarray
    directions: np.ndarray
    kind_by_step: np.ndarray

    def __len__(self):
        return len(self.midpoints)


def _segments(points, closed=False):
    pts = np.asarray(points, dtype=float)
    if closed and not np.allclose(pts[0], pts[-1]):
        pts = np.vstack([pts, pts[:1]])
    mids, dirs = [], []
    for a, b in zip(pts[:-1], pts[1:]):
        L = float(np.hypot(*(b - a)))
        if L == 0.0:
            continue
        n = int(np.ceil(L / MAP_SEGMENT_MAX))
        u = (b - a) / L
        for k in range(n):
            mids.append(a + (b - a) * (k + 0.5) / n)
            dirs.append(u)
    return mids, dirs


def build_map_tokens(scenario: Scenario) -> MapTokens:
    mids, dirs, kinds = [], [], []
    n_steps = None
    for lane in scenario.map.lane_centers:
        m, d = _segments(lane.points)
        mids += m
        dirs += d
        kinds += [[0]] * len(m)
    for poly in scenario.map.drivable_polygons:
        m, d = _segments(poly, closed=True)
        mids += m
        dirs += d
        kinds += [[1]] * len(m)
    signal_rows = []
    for lane in scenario.map.lane_centers:
        if lane.signal is None:
            continue
        pts = lane.points
        i = lane.signal.stop_line_index
        j = min(i + 1, len(pts) - 1)
        a, b = (pts[i - 1], pts[i]) if j == i else (pts[i], pts[j])
        u = (b - a) / max(np.hypot(*(b - a)), 1e-12)
        mids.append(pts[i])
        dirs.append(u)
        signal_rows.append(np.where(lane.signal.red, 3, 2))
        n_steps = len(lane.signal.phase)
    n_steps = n_steps or 91
    static = np.array([k[0] for k in kinds], dtype=int)
    kind_by_step = np.repeat(static[:, None], n_steps, axis=1)
    if signal_rows:
        kind_by_step = np.vstack([kind_by_step, np.stack(signal_rows)])
    return MapTokens(np.array(mids).reshape(-1, 2), np.array(dirs).reshape(-1, 2), kind_by_step)


def map_features(tokens: MapTokens, poses, steps, k: int):
    """Local-frame features of the ``k`` nearest map tokens.

    ``poses`` is ``(..., 3)``, ``steps`` the 10 Hz step index of each pose
    (broadcast against ``poses[..., 0]``). Returns ``(feats (..., k, F_MAP),
    mask (..., k))``. Neighbours are ordered by distance, ties by token index.
    """
    poses = np.asarray(poses, dtype=float)
    lead = poses.shape[:-1]
    steps = np.broadcast_to(np.asarray(steps), lead)
    M = len(tokens)
    kk = min(k, M)
    feats = np.zeros(lead + (k, F_MAP))
    mask = np.zeros(lead + (k,), dtype=bool)
    if kk == 0:
        return feats, mask
    diff = tokens.midpoints - poses[..., None, :2]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    order = np.argsort(dist, axis=-1, kind="stable")[..., :kk]
    d_sel = np.take_along_axis(dist, order, -1)
    mid = tokens.midpoints[order]
    dirs = tokens.directions[order]
    c = np.cos(poses[..., 2])[..., None]
    s = np.sin(poses[..., 2])[..., None]
    dx = mid[..., 0] - poses[..., 0][..., None]
    dy = mid[..., 1] - poses[..., 1][..., None]
    kinds = tokens.kind_by_step[order, steps[..., None]]
    feats[..., :kk, 0] = (c * dx + s * dy) / REL_SCALE
    feats[..., :kk, 1] = (-s * dx + c * dy) / REL_SCALE
    feats[..., :kk, 2] = c * dirs[..., 0] + s * dirs[..., 1]
    feats[..., :kk, 3] = -s * dirs[..., 0] + c * dirs[..., 1]
    feats[..., :kk, 4] = d_sel / REL_SCALE
    feats[..., :kk, 5:] = np.eye(len(MAP_KINDS))[kinds]
    mask[..., :kk] = True
    return feats, mask


@dataclass(eq=False)
class ForwardBatch:
    """Padded tensors for ``B`` scenes x ``A`` agents x ``T`` token steps.

    ``tokens[..., t]`` is the motion from boundary ``t`` to ``t+1``; position
    ``t`` is fed the previous token and the pose at boundary ``t`` and predicts
    ``tokens[..., t]``.
    """

    tokens: np.ndarray  # (B, A, T) int
    deltas: np.ndarray  # (B, A, T, 3)
    token_valid: np.ndarray  # (B, A, T)
    poses: np.ndarray  # (B, A, T, 3) pose at the start boundary of each step
    pos_valid: np.ndarray  # (B, A, T)
    kinds: np.ndarray  # (B, A) int
    agent_valid: np.ndarray  # (B, A)
    map_feats: np.ndarray  # (B, A, T, K, F_MAP)
    map_mask: np.ndarray  # (B, A, T, K)

    @property
    def shape(self):
        return self.tokens.shape

    def take(self, idx) -> "ForwardBatch":
        return ForwardBatch(*(getattr(self, f)[idx] for f in _BATCH_FIELDS))


_BATCH_FIELDS = (
    "tokens",
    "deltas",
    "token_valid",
    "poses",
    "pos_valid",
    "kinds",
    "agent_valid",
    "map_feats",
    "map_mask",
)


@dataclass(eq=False)
class SceneSequence:
    """Token sequence of every agent of one scene, before padding."""

    tokens: np.ndarray  # (A, T)
    deltas: np.ndarray  # (A, T, 3)
    token_valid: np.ndarray  # (A, T)
    boundary_poses: np.ndarray  # (A, T+1, 3)
    boundary_valid: np.ndarray  # (A, T+1)
    kinds: np.ndarray  # (A,)
    map_tokens: MapTokens = field(repr=False, default=None)
    start_step: int = 0


def make_batch(seqs: list[SceneSequence], cfg: ModelConfig, n_steps: int | None = None) -> ForwardBatch:
    """Pad scene sequences into one batch, computing map features per boundary pose."""
    T = cfg.total_steps if n_steps is None else n_steps
    A = max(len(s.kinds) for s in seqs)
    if A > cfg.max_agents:
        raise ModelError(f"agent count {A} exceeds cap {cfg.max_agents}")
    B, K = len(seqs), cfg.neighbor_k
    out = dict(
        tokens=np.zeros((B, A, T), int),
        deltas=np.zeros((B, A, T, 3)),
        token_valid=np.zeros((B, A, T), bool),
        poses=np.zeros((B, A, T, 3)),
        pos_valid=np.zeros((B, A, T), bool),
        kinds=np.zeros((B, A), int),
        agent_valid=np.zeros((B, A), bool),
        map_feats=np.zeros((B, A, T, K, F_MAP)),
        map_mask=np.zeros((B, A, T, K), bool),
    )
    for b, s in enumerate(seqs):
        n = len(s.kinds)
        if s.map_tokens is not None and len(s.map_tokens) > cfg.map_token_count:
            raise ModelError(f"map token count {len(s.map_tokens)} exceeds cap {cfg.map_token_count}")
        out["tokens"][b, :n] = s.tokens[:, :T]
        out["deltas"][b, :n] = s.deltas[:, :T]
        out["token_valid"][b, :n] = s.token_valid[:, :T]
        out["poses"][b, :n] = s.boundary_poses[:, :T]
        out["pos_valid"][b, :n] = s.boundary_valid[:, :T]
        out["kinds"][b, :n] = s.kinds
        out["agent_valid"][b, :n] = True
        if s.map_tokens is not None:
            steps = s.start_step + TOKEN_HORIZON * np.arange(T)
            f, m = map_features(s.map_tokens, s.boundary_poses[:, :T], steps[None, :], K)
            out["map_feats"][b, :n] = f
            out["map_mask"][b, :n] = m & s.boundary_valid[:, :T, None]
    return ForwardBatch(**out)


def concat_batches(batches: list[ForwardBatch]) -> ForwardBatch:
    A = max(b.shape[1] for b in batches)
    parts = {f: [] for f in _BATCH_FIELDS}
    for b in batches:
        pad = A - b.shape[1]
        for f in _BATCH_FIELDS:
            arr = getattr(b, f)
            if pad:
                widths = [(0, 0), (0, pad)] + [(0, 0)] * (arr.ndim - 2)
                arr = np.pad(arr, widths)
            parts[f].append(arr)
    return ForwardBatch(**{f: np.concatenate(v) for f, v in parts.items()})


# --------------------------------------------------------------------------
# forward pass


def _to_torch(params: Parameters | dict, requires_grad=False) -> dict:
    arrays = params.arrays if isinstance(params, Parameters) else params
    out = {}
    for k, v in arrays.items():
        t = torch.from_numpy(np.ascontiguousarray(v, dtype=np.float64))
        if requires_grad:
            t = t.clone().requires_grad_(True)
        out[k] = t
    return out


def _layer_norm(x, g, b):
    return torch.nn.functional.layer_norm(x, (x.shape[-1],), g, b, eps=1e-5)


def _heads(x, n_heads):
    return x.reshape(x.shape[:-1] + (n_heads, x.shape[-1] // n_heads))


def _merge(x):
    return x.reshape(x.shape[:-2] + (-1,))


def _rel_features(poses):
    """Pose of agent b in agent a's frame: (B, A, A, T, F_REL) -> returned as (B, T, A, A, F)."""
    p = poses.permute(0, 2, 1, 3)  # (B, T, A, 3)
    dx = p[:, :, None, :, 0] - p[:, :, :, None, 0]
    dy = p[:, :, None, :, 1] - p[:, :, :, None, 1]
    h = p[..., 2]
    c = torch.cos(h)[:, :, :, None]
    s = torch.sin(h)[:, :, :, None]
    dh = h[:, :, None, :] - h[:, :, :, None]
    lx = (c * dx + s * dy) / REL_SCALE
    ly = (-s * dx + c * dy) / REL_SCALE
    return torch.stack([lx, ly, torch.cos(dh), torch.sin(dh), torch.sqrt(lx * lx + ly * ly + 1e-12)], -1)


def _attend(q, k, v, mask, scale):
    """Masked scaled dot-product attention; mask broadcasts to the score shape."""
    scores = torch.einsum("...qhd,...khd->...hqk", q, k) * scale
    scores = scores.masked_fill(~mask, NEG)
    w = torch.softmax(scores, dim=-1)
    return torch.einsum("...hqk,...khd->...qhd", w, v)


def _params_torch(params):
    if isinstance(params, dict) and params and isinstance(next(iter(params.values())), torch.Tensor):
        return params
    return _to_torch(params)


def _run(P, batch: ForwardBatch, cfg: ModelConfig, t0: int, t1: int, cache: dict | None):
    """Positions ``[t0, t1)`` of the stack; ``cache`` holds temporal keys/values of ``[0, t0)``."""
    B, A = batch.tokens.shape[:2]
    d, H, V = cfg.d_model, cfg.n_heads, cfg.vocab_max
    scale = 1.0 / np.sqrt(d // H)
    sl = slice(t0, t1)

    kinds = torch.from_numpy(batch.kinds)
    # position t sees token t-1; BOS at t=0, UNK for invalid previous tokens
    bos, unk = len(KINDS) * V, len(KINDS) * V + 1
    lo = max(t0 - 1, 0)
    tokens = torch.from_numpy(batch.tokens[:, :, lo : t1 - 1])
    tv = torch.from_numpy(batch.token_valid[:, :, lo : t1 - 1])
    prev = torch.where(tv, kinds[:, :, None] * V + tokens, torch.full_like(tokens, unk))
    delta = torch.from_numpy(batch.deltas[:, :, lo : t1 - 1]) * tv[..., None].to(torch.float64)
    delta = delta / torch.tensor([DELTA_SCALE, 1.0, 1.0], dtype=torch.float64)
    if t0 == 0:
        prev = torch.cat([torch.full((B, A, 1), bos, dtype=prev.dtype), prev], dim=-1)
        delta = torch.cat([torch.zeros((B, A, 1, 3), dtype=torch.float64), delta], dim=-2)

    x = P["tok_emb"][prev] + delta @ P["delta_w"] + P["kind_emb"][kinds][:, :, None, :] + P["time_emb"][sl]

    pos_valid = torch.from_numpy(batch.pos_valid[:, :, :t1])
    q_idx = torch.arange(t0, t1)[:, None]
    causal = torch.arange(t1)[None, :] <= q_idx
    # a position always sees itself, so rows of invalid positions never fall back to uniform over the future
    own = torch.arange(t1)[None, :] == q_idx
    tmask = causal[None, None, None] & (pos_valid[:, :, None, None, :] | own[None, None, None])  # (B,A,1,Tq,Tk)
    mmask = torch.from_numpy(batch.map_mask[:, :, sl])[..., None, None, :]  # (B,A,Tq,1,1,K)
    mfeat = torch.from_numpy(batch.map_feats[:, :, sl])
    rel = _rel_features(torch.from_numpy(batch.poses[:, :, sl]))  # (B,Tq,A,A,F)
    amask = torch.from_numpy(batch.pos_valid[:, :, sl]).permute(0, 2, 1)[:, :, None, None, :]

    for blk in range(cfg.n_blocks):
        p = f"block{blk}."
        # temporal self-attention, causal over each agent's token steps
        h = _layer_norm(x, P[p + "ln_t.g"], P[p + "ln_t.b"])
        q, k, v = (_heads(h @ P[p + f"tmp.{w}"], H) for w in ("wq", "wk", "wv"))
        if cache is not None:
            if blk in cache:
                k = torch.cat([cache[blk][0], k], dim=2)
                v = torch.cat([cache[blk][1], v], dim=2)
            cache[blk] = (k, v)
        x = x + _merge(_attend(q, k, v, tmask, scale)) @ P[p + "tmp.wo"]

        # map-to-agent cross-attention
        h = _layer_norm(x, P[p + "ln_m.g"], P[p + "ln_m.b"])
        q = _heads(h @ P[p + "map.wq"], H)[..., None, :, :]  # (B,A,T,1,H,dh)
        mem = torch.nn.functional.gelu(mfeat @ P[p + "map.in_w"] + P[p + "map.in_b"])
        k = _heads(mem @ P[p + "map.wk"], H)
        v = _heads(mem @ P[p + "map.wv"], H)
        att = _attend(q, k, v, mmask, scale)[..., 0, :, :]
        x = x + _merge(att) @ P[p + "map.wo"]

        # agent-to-agent self-attention within each token step
        h = _layer_norm(x, P[p + "ln_a.g"], P[p + "ln_a.b"]).permute(0, 2, 1, 3)  # (B,T,A,d)
        q = _heads(h @ P[p + "agt.wq"], H)  # (B,T,Aq,H,dh)
        k = _heads(h @ P[p + "agt.wk"], H)[:, :, None] + _heads(rel @ P[p + "agt.rel_k"], H)
        v = _heads(h @ P[p + "agt.wv"], H)[:, :, None] + _heads(rel @ P[p + "agt.rel_v"], H)
        scores = torch.einsum("btqhd,btqkhd->bthqk", q, k) * scale
        scores = scores.masked_fill(~amask, NEG)
        w = torch.softmax(scores, dim=-1)
        att = torch.einsum("bthqk,btqkhd->btqhd", w, v)
        x = x + (_merge(att) @ P[p + "agt.wo"]).permute(0, 2, 1, 3)

        h = _layer_norm(x, P[p + "ln_f.g"], P[p + "ln_f.b"])
        h = torch.nn.functional.gelu(h @ P[p + "ffn.w1"] + P[p + "ffn.b1"])
        x = x + h @ P[p + "ffn.w2"] + P[p + "ffn.b2"]

    h = _layer_norm(x, P["ln_out.g"], P["ln_out.b"])
    logits = h @ P["head.w"] + P["head.b"]
    sizes = torch.tensor(cfg.vocab_sizes)[kinds]  # (B,A)
    allowed = torch.arange(V)[None, None, :] < sizes[..., None]
    return logits.masked_fill(~allowed[:, :, None, :], NEG)


def _check_caps(batch: ForwardBatch, cfg: ModelConfig):
    B, A, T = batch.tokens.shape
    if A > cfg.max_agents:
        raise ModelError(f"agent count {A} exceeds cap {cfg.max_agents}")
    if T > cfg.total_steps:
        raise ModelError(f"sequence of {T} token steps exceeds {cfg.total_steps}")


def forward_all(params, batch: ForwardBatch, cfg: ModelConfig) -> torch.Tensor:
    """Logits for every position, shape ``(B, A, T, vocab_max)`` (torch tensor)."""
    _check_caps(batch, cfg)
    return _run(_params_torch(params), batch, cfg, 0, batch.tokens.shape[2], None)


class IncrementalDecoder:
    """Step-by-step evaluation with cached temporal keys/values.

    ``step(batch, t)`` returns the logits of position ``t`` given that
    positions ``< t`` were already fed; results match :func:`forward_all` up
    to floating-point reassociation.
    """

    def __init__(self, params, cfg: ModelConfig):
        self.P = _params_torch(params)
        self.cfg = cfg
        self.cache: dict = {}
        self.next_pos = 0

    @torch.no_grad()
    def step(self, batch: ForwardBatch, t: int) -> torch.Tensor:
        _check_caps(batch, self.cfg)
        if t < self.next_pos:
            raise ValueError("positions must be fed in order")
        out = _run(self.P, batch, self.cfg, self.next_pos, t + 1, self.cache)
        self.next_pos = t + 1
        return out[:, :, -1]


def forward(params, batch: ForwardBatch, cfg: ModelConfig) -> np.ndarray:
    """Next-token logits for the future token steps, ``(B, A, future_steps, V)``."""
    with torch.no_grad():
        out = forward_all(params, batch, cfg)
    return out[:, :, cfg.history_token_steps :].numpy()


# --------------------------------------------------------------------------
# losses


def _tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _out(value, like):
    if any(isinstance(v, torch.Tensor) for v in like):
        return value
    v = value.detach().numpy()
    return float(v) if v.ndim == 0 else v


def log_probs_of(logits, indices, mask=None):
    """``log softmax(logits)[index]`` per position (masked entries set to 0)."""
    lg = _tensor(logits)
    idx = _tensor(indices, torch.long)
    lp = torch.log_softmax(lg, dim=-1).gather(-1, idx[..., None])[..., 0]
    if mask is not None:
        lp = torch.where(_tensor(mask, torch.bool), lp, torch.zeros_like(lp))
    return _out(lp, (logits,))


def ce_loss(logits, target_indices, mask, reduction: str = "mean"):
    """Cross-entropy of the targets, averaged (or summed) over valid positions."""
    m = _tensor(mask, torch.bool)
    n = int(m.sum())
    if n == 0:
        raise ValueError("ce_loss: empty mask")
    lp = torch.log_softmax(_tensor(logits), dim=-1).gather(-1, _tensor(target_indices, torch.long)[..., None])[..., 0]
    total = -(lp * m).sum()
    loss = total / n if reduction == "mean" else total
    return _out(loss, (logits,))


def kl_per_token(logp, logp_ref):
    """Non-negative per-token KL estimate ``x - log x - 1`` with ``x = pi_ref / pi``."""
    if isinstance(logp, torch.Tensor) or isinstance(logp_ref, torch.Tensor):
        r = _tensor(logp_ref) - _tensor(logp)
        return torch.exp(r) - r - 1.0
    r = np.asarray(logp_ref, dtype=float) - np.asarray(logp, dtype=float)
    out = np.exp(r) - r - 1.0
    return float(out) if np.ndim(out) == 0 else out


def mpo_loss(logp_sampled, logp_ref, advantage, beta: float, mask):
    """Metric-oriented policy loss averaged over valid tokens.

    ``ratio = exp(logp - stopgrad(logp))`` has value 1 and gradient ``grad logp``;
    per token the loss is ``-(ratio * A - beta * KL)``.
    """
    lp = _tensor(logp_sampled)
    m = _tensor(mask, torch.bool)
    n = int(m.sum())
    if n == 0:
        raise ValueError("mpo_loss: empty mask")
    ratio = torch.exp(lp - lp.detach())
    adv = torch.broadcast_to(_tensor(advantage), lp.shape)
    kl = kl_per_token(lp, _tensor(logp_ref))
    per_tok = -(ratio * adv - beta * kl)
    loss = (per_tok * m).sum() / n
    return _out(loss, (logp_sampled,))


@dataclass
class CELoss:
    """Cross-entropy against target indices on future token steps."""

    targets: np.ndarray  # (B, A, F)
    mask: np.ndarray  # (B, A, F)
    reduction: str = "mean"

    def __call__(self, future_logits):
        return ce_loss(future_logits, torch.from_numpy(self.targets), torch.from_numpy(self.mask), self.reduction)


@dataclass
class MPOLoss:
    """Policy-gradient loss on sampled tokens with a frozen reference."""

    sampled: np.ndarray  # (B, A, F)
    logp_ref: np.ndarray  # (B, A, F)
    advantage: np.ndarray  # broadcastable to (B, A, F)
    beta: float
    mask: np.ndarray

    def __call__(self, future_logits):
        lp = log_probs_of(future_logits, torch.from_numpy(self.sampled))
        return mpo_loss(
            lp,
            torch.from_numpy(np.asarray(self.logp_ref, dtype=float)),
            torch.from_numpy(np.asarray(self.advantage, dtype=float)),
            self.beta,
            torch.from_numpy(self.mask),
        )


def loss_value(params, batch: ForwardBatch, cfg: ModelConfig, loss_spec) -> float:
    with torch.no_grad():
        logits = forward_all(params, batch, cfg)[:, :, cfg.history_token_steps :]
        return float(loss_spec(logits))


def grad(params: Parameters, batch: ForwardBatch, cfg: ModelConfig, loss_spec):
    """Loss value and exact reverse-mode gradients (same names and shapes as params)."""
    P = _to_torch(params, requires_grad=True)
    logits = forward_all(P, batch, cfg)[:, :, cfg.history_token_steps :]
    loss = loss_spec(logits)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {float(loss.detach())} (max |logit| {float(logits.detach().abs().max()):.3g})")
    names = list(P)
    gs = torch.autograd.grad(loss, [P[n] for n in names], allow_unused=True)
    grads = {}
    for n, g in zip(names, gs):
        grads[n] = np.zeros_like(params.arrays[n]) if g is None else g.numpy().copy()
    return float(loss.detach()), grads


# --------------------------------------------------------------------------
# optimizer


@dataclass(eq=False)
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Parameters) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.arrays.items()}, {k: np.zeros_like(a) for k, a in params.arrays.items()})


def adam_step(
    params: Parameters,
    grads: dict,
    lr: float,
    betas=(0.9, 0.999),
    eps_opt: float = 1e-8,
    step_index: int | None = None,
    state: AdamState | None = None,
):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    state = state or AdamState.zeros_like(params)
    t = (state.step + 1) if step_index is None else int(step_index)
    b1, b2 = betas
    new, m_out, v_out = {}, {}, {}
    for k, p in params.arrays.items():
        g = grads[k]
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps_opt)
        m_out[k], v_out[k] = m, v
    return Parameters(new, params.seed), AdamState(m_out, v_out, t)


# --------------------------------------------------------------------------
# checkpoints


@dataclass(eq=False)
class Checkpoint:
    config: ModelConfig
    params: Parameters
    vocab_hash: str
    optimizer: AdamState | None = None
    stage_history: list = field(default_factory=list)

    def with_stage(self, stage: str, params: Parameters, optimizer: AdamState | None) -> "Checkpoint":
        return Checkpoint(self.config, params, self.vocab_hash, optimizer, [*self.stage_history, stage])


def _arrays_to_json(arrays: dict) -> dict:
    return {k: {"shape": list(a.shape), "data": a.ravel().tolist()} for k, a in arrays.items()}


def _arrays_from_json(d: dict) -> dict:
    return {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in d.items()}


def checkpoint_to_dict(ck: Checkpoint) -> dict:
    opt = None
    if ck.optimizer is not None:
        opt = {"step": ck.optimizer.step, "m": _arrays_to_json(ck.optimizer.m), "v": _arrays_to_json(ck.optimizer.v)}
    return {
        "config": ck.config.to_dict(),
        "vocab_hash": ck.vocab_hash,
        "seed": ck.params.seed,
        "params": _arrays_to_json(ck.params.arrays),
        "optimizer": opt,
        "stage_history": list(ck.stage_history),
    }


def save_checkpoint(ck: Checkpoint, path) -> None:
    Path(path).write_text(json.dumps(checkpoint_to_dict(ck)), encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    opt = None
    if d.get("optimizer"):
        o = d["optimizer"]
        opt = AdamState(_arrays_from_json(o["m"]), _arrays_from_json(o["v"]), int(o["step"]))
    return Checkpoint(
        ModelConfig.from_dict(d["config"]),
        Parameters(_arrays_from_json(d["params"]), int(d.get("seed", 0))),
        d["vocab_hash"],
        opt,
        list(d.get("stage_history", [])),
    )
