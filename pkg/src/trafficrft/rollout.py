"""Closed-loop autoregressive simulation of every agent in a scene.

At each future token step the policy scores the next motion token of all
agents jointly, a token is chosen per agent (sampled, greedy, or CAT-K), the
agents are advanced by composing the template motion, and the context for the
next step is rebuilt from the reconstructed poses only.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .geometry import compose, relative
from .policy_model import (
    Checkpoint,
    ForwardBatch,
    MapTokens,
    ModelConfig,
    SceneSequence,
    build_map_tokens,
    IncrementalDecoder,
    make_batch,
    map_features,
)
from .scenario import CURRENT_INDEX, KINDS, Scenario
from .tokenizer import (
    FUTURE_TOKEN_STEPS,
    HISTORY_TOKEN_STEPS,
    TOKEN_HORIZON,
    TOTAL_TOKEN_STEPS,
    TokenSeq,
    Vocabulary,
    interpolate_poses,
    nearest_tokens,
    token_distance,
    tokenize,
)


class ConfigurationError(ValueError):
    """Model, vocabulary or run configuration do not fit together."""


@dataclass(frozen=True)
class SamplingSpec:
    temperature: float = 1.0
    top_k: int | None = None
    greedy: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass(eq=False)
class RolloutBatch:
    """``R`` joint rollouts of one scene."""

    scenario_id: str
    agent_ids: list
    kinds: list
    tokens: np.ndarray  # (R, A, F) int
    log_probs: np.ndarray  # (R, A, F)
    token_poses: np.ndarray  # (R, A, F+1, 3), element 0 is the current pose
    tracks: np.ndarray  # (R, A, 91, 3), logged history then simulated future
    valid: np.ndarray  # (R, A, 91)
    seeds: list = field(default_factory=list)

    @property
    def n_rollouts(self) -> int:
        return self.tokens.shape[0]

    def select(self, idx) -> "RolloutBatch":
        idx = np.atleast_1d(idx)
        return RolloutBatch(
            self.scenario_id,
            self.agent_ids,
            self.kinds,
            self.tokens[idx],
            self.log_probs[idx],
            self.token_poses[idx],
            self.tracks[idx],
            self.valid[idx],
            [self.seeds[i] for i in idx] if self.seeds else [],
        )


def rollout_seed(base_seed: int, scenario_id: str, r: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base_seed) & 0xFFFFFFFF, zlib.crc32(scenario_id.encode()), int(r)])


def check_vocab(ck: Checkpoint, vocab: Vocabulary) -> None:
    if ck.vocab_hash != vocab.content_hash:
        raise ConfigurationError(
            f"vocabulary hash mismatch: checkpoint {ck.vocab_hash[:12]} vs vocabulary {vocab.content_hash[:12]}"
        )
    sizes = tuple(vocab.size(k) for k in KINDS)
    if sizes != ck.config.vocab_sizes:
        raise ConfigurationError(f"vocabulary sizes {sizes} do not match model {ck.config.vocab_sizes}")


def padded_templates(vocab: Vocabulary) -> np.ndarray:
    """Templates of every kind padded to a common size, ``(n_kinds, V, 3)``."""
    V = vocab.max_size
    out = np.zeros((len(KINDS), V, 3))
    for i, k in enumerate(KINDS):
        t = vocab.templates[k]
        out[i, : len(t)] = t
    return out


# --------------------------------------------------------------------------
# sequences from logged data


def boundary_steps(start: int = 0, n: int = TOTAL_TOKEN_STEPS + 1) -> np.ndarray:
    return start + TOKEN_HORIZON * np.arange(n)


def gt_sequence(scenario: Scenario, vocab: Vocabulary, map_tokens: MapTokens | None = None) -> SceneSequence:
    """Teacher-forcing sequence: logged boundary poses and gt-anchored tokens."""
    steps = boundary_steps()
    poses = scenario.poses()[:, steps]
    valid = scenario.valid()[:, steps]
    kinds = np.array([KINDS.index(m.kind) for m in scenario.metas])
    deltas = relative(poses[:, :-1], poses[:, 1:])
    tv = valid[:, :-1] & valid[:, 1:]
    tokens = np.zeros(tv.shape, int)
    for a, meta in enumerate(scenario.metas):
        tokens[a] = nearest_tokens(deltas[a], vocab.templates[meta.kind], vocab.heading_weight_lambda)
    tokens = np.where(tv, tokens, 0)
    deltas = np.where(tv[..., None], deltas, 0.0)
    mt = build_map_tokens(scenario) if map_tokens is None else map_tokens
    return SceneSequence(tokens, deltas, tv, poses, valid, kinds, mt, 0)


def logged_future_tokens(scenario: Scenario, vocab: Vocabulary) -> np.ndarray:
    """Rollout-anchored tokens of the logged future, ``(A, F)``."""
    return np.stack(
        [tokenize(t, vocab, m.kind, "rollout_anchored").indices for m, t in scenario.agents]
    )


# --------------------------------------------------------------------------
# closed-loop engine

Chooser = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


@dataclass(eq=False)
class SimResult:
    """Outcome of one closed-loop run.

    ``batch`` holds the context every position was fed during the run, so a
    teacher-forced forward pass over it reproduces ``logits``.
    """

    tokens: np.ndarray  # (B, A, F)
    log_probs: np.ndarray  # (B, A, F)
    poses: np.ndarray  # (B, A, F+1, 3)
    logits: np.ndarray  # (B, A, F, V)
    batch: ForwardBatch
    active: np.ndarray  # (B, A)


def _truncate(batch: ForwardBatch, T: int) -> ForwardBatch:
    return ForwardBatch(
        batch.tokens[:, :, :T],
        batch.deltas[:, :, :T],
        batch.token_valid[:, :, :T],
        batch.poses[:, :, :T],
        batch.pos_valid[:, :, :T],
        batch.kinds,
        batch.agent_valid,
        batch.map_feats[:, :, :T],
        batch.map_mask[:, :, :T],
    )


def simulate(
    params,
    cfg: ModelConfig,
    vocab: Vocabulary,
    seqs: list[SceneSequence],
    choose: Chooser,
    n_token_steps: int = FUTURE_TOKEN_STEPS,
):
    """Run the closed loop for a batch of (possibly replicated) scenes.

    ``choose(logits (B, A, V), step, poses (B, A, 3)) -> (B, A)`` picks tokens.
    ``poses[:, :, 0]`` of the result is the current pose.
    """
    H = cfg.history_token_steps
    batch = make_batch(seqs, cfg)
    B, A, T = batch.tokens.shape
    tpl = padded_templates(vocab)
    kinds = batch.kinds
    row_tpl = tpl[kinds]  # (B, A, V, 3)
    active = batch.agent_valid & batch.pos_valid[:, :, H]
    poses = np.zeros((B, A, n_token_steps + 1, 3))
    poses[:, :, 0] = batch.poses[:, :, H]
    tokens = np.zeros((B, A, n_token_steps), int)
    logps = np.zeros((B, A, n_token_steps))
    all_logits = np.zeros((B, A, n_token_steps, cfg.vocab_max))
    decoder = IncrementalDecoder(params, cfg)
    # replicated rows of one scene share a map and get their features in one call
    groups: dict = {}
    for b, s in enumerate(seqs):
        groups.setdefault((s.map_tokens, len(s.kinds)), []).append(b)
    groups = {k: np.array(v) for k, v in groups.items()}
    for j in range(n_token_steps):
        t = H + j
        lg = decoder.step(batch, t).numpy()
        k = choose(lg, j, poses[:, :, j])
        k = np.where(active, k, 0)
        lse = np.log(np.exp(lg - lg.max(-1, keepdims=True)).sum(-1)) + lg.max(-1)
        logps[:, :, j] = np.take_along_axis(lg, k[..., None], -1)[..., 0] - lse
        tokens[:, :, j] = k
        all_logits[:, :, j] = lg
        d = np.take_along_axis(row_tpl, k[..., None, None], axis=2)[:, :, 0]
        poses[:, :, j + 1] = compose(poses[:, :, j], d)
        if t + 1 < T:
            batch.tokens[:, :, t] = k
            batch.deltas[:, :, t] = d
            batch.token_valid[:, :, t] = active
            batch.poses[:, :, t + 1] = poses[:, :, j + 1]
            batch.pos_valid[:, :, t + 1] = active
            step = CURRENT_INDEX + TOKEN_HORIZON * (j + 1)
            for (mt, n), rows in groups.items():
                f, m = map_features(mt, poses[rows, :n, j + 1], step, cfg.neighbor_k)
                batch.map_feats[rows, :n, t + 1] = f
                batch.map_mask[rows, :n, t + 1] = m & active[rows, :n, None]
    return SimResult(tokens, logps, poses, all_logits, batch, active)


def _masked_logits(lg, kinds, cfg):
    sizes = np.array(cfg.vocab_sizes)[kinds]
    allowed = np.arange(lg.shape[-1]) < sizes[..., None]
    return np.where(allowed, lg, -np.inf), sizes


def sampling_chooser(cfg: ModelConfig, kinds: np.ndarray, spec: SamplingSpec, rngs: list) -> Chooser:
    """Temperature / top-k sampling with one generator per batch row."""

    def choose(lg, j, poses):
        lg, sizes = _masked_logits(lg, kinds, cfg)
        if spec.greedy:
            return np.argmax(lg, axis=-1)
        z = lg / spec.temperature
        if spec.top_k is not None:
            order = np.argsort(-z, axis=-1, kind="stable")
            ranks = np.argsort(order, axis=-1, kind="stable")
            z = np.where(ranks < spec.top_k, z, -np.inf)
        z = z - z.max(-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(-1, keepdims=True)
        c = np.cumsum(p, axis=-1)
        out = np.zeros(lg.shape[:-1], int)
        for b, rng in enumerate(rngs):
            u = rng.random(lg.shape[1])
            idx = (c[b] < u[:, None] * c[b, :, -1:]).sum(-1)
            out[b] = np.minimum(idx, sizes[b] - 1)
        return out

    return choose


def catk_choice(lg, pose, gt_next, gt_valid, templates, size, K, heading_weight=1.0):
    """CAT-K pick for one agent: among the top-K tokens by probability, the
    one whose next pose is closest to the logged next pose (ties: lowest index)."""
    kk = min(K, size)
    order = np.argsort(-lg[:size], kind="stable")[:kk]
    if not gt_valid:
        return int(order[0])
    cand = compose(pose, templates[order])
    d = token_distance(cand, gt_next, heading_weight)
    best = d.min()
    return int(order[d == best].min())


def catk_chooser(cfg, vocab, kinds, gt_next_poses, gt_next_valid, K) -> Chooser:
    """Chooser applying :func:`catk_choice` to every (row, agent)."""
    tpl = padded_templates(vocab)
    lam = vocab.heading_weight_lambda

    def choose(lg, j, poses):
        B, A, V = lg.shape
        out = np.zeros((B, A), int)
        sizes = np.array(cfg.vocab_sizes)[kinds]
        for b in range(B):
            for a in range(A):
                out[b, a] = catk_choice(
                    lg[b, a], poses[b, a], gt_next_poses[b, a, j], gt_next_valid[b, a, j], tpl[kinds[b, a]], sizes[b, a], K, lam
                )
        return out

    return choose


def future_ground_truth(seqs, A, n=FUTURE_TOKEN_STEPS):
    """Logged next-boundary poses for every future token step, padded to ``A`` agents."""
    H = HISTORY_TOKEN_STEPS
    P = np.zeros((len(seqs), A, n, 3))
    V = np.zeros((len(seqs), A, n), bool)
    for b, s in enumerate(seqs):
        m = len(s.kinds)
        P[b, :m] = s.boundary_poses[:, H + 1 : H + 1 + n]
        V[b, :m] = s.boundary_valid[:, H + 1 : H + 1 + n]
    return P, V


def rollout_catk(params, cfg, vocab, seqs: list[SceneSequence], K: int, n_token_steps: int = FUTURE_TOKEN_STEPS):
    """CAT-K guided closed loop; ``result.tokens`` are the recovery targets."""
    if not 1 <= K <= cfg.vocab_max:
        raise ValueError(f"K must be in [1, {cfg.vocab_max}]")
    A = max(len(s.kinds) for s in seqs)
    kinds = np.zeros((len(seqs), A), int)
    for b, s in enumerate(seqs):
        kinds[b, : len(s.kinds)] = s.kinds
    gt_p, gt_v = future_ground_truth(seqs, A, n_token_steps)
    choose = catk_chooser(cfg, vocab, kinds, gt_p, gt_v, K)
    return simulate(params, cfg, vocab, seqs, choose, n_token_steps)


def _assemble(scenario: Scenario, vocab, tokens, logps, poses, seeds) -> RolloutBatch:
    n = scenario.n_agents
    tokens, logps, poses = tokens[:, :n], logps[:, :n], poses[:, :n]
    R = tokens.shape[0]
    fut = interpolate_poses(poses, TOKEN_HORIZON)  # (R, n, 5F+1, 3)
    hist = scenario.poses()[:, :CURRENT_INDEX]
    tracks = np.concatenate([np.broadcast_to(hist, (R,) + hist.shape), fut], axis=2)
    lv = scenario.valid()
    active = lv[:, CURRENT_INDEX]
    valid = np.concatenate(
        [np.broadcast_to(lv[:, :CURRENT_INDEX], (R, n, CURRENT_INDEX)), np.broadcast_to(active[None, :, None], (R, n, fut.shape[2]))],
        axis=2,
    ).copy()
    return RolloutBatch(
        scenario.scenario_id,
        [m.agent_id for m in scenario.metas],
        [m.kind for m in scenario.metas],
        tokens,
        logps,
        poses,
        np.ascontiguousarray(tracks),
        valid,
        list(seeds),
    )


def batch_rollouts(
    ck: Checkpoint,
    scenario: Scenario,
    vocab: Vocabulary,
    sampling: SamplingSpec,
    R: int,
    n_token_steps: int = FUTURE_TOKEN_STEPS,
    seq: SceneSequence | None = None,
) -> RolloutBatch:
    """``R`` independent sampled rollouts; rollout ``r`` is seeded from (seed, scenario_id, r)."""
    check_vocab(ck, vocab)
    return _batch_rollouts(ck.params, ck.config, scenario, vocab, sampling, range(R), n_token_steps, seq)


def _batch_rollouts(
    params, cfg, scenario, vocab, sampling, rollout_ids, n_token_steps=FUTURE_TOKEN_STEPS, seq=None, return_sim=False
):
    rollout_ids = list(rollout_ids)
    if not rollout_ids:
        raise ValueError("R must be >= 1")
    seq = gt_sequence(scenario, vocab) if seq is None else seq
    seeds = [rollout_seed(sampling.seed, scenario.scenario_id, r) for r in rollout_ids]
    rngs = [np.random.default_rng(s) for s in seeds]
    kinds = np.broadcast_to(seq.kinds, (len(rollout_ids), len(seq.kinds)))
    choose = sampling_chooser(cfg, kinds, sampling, rngs)
    res = simulate(params, cfg, vocab, [seq] * len(rollout_ids), choose, n_token_steps)
    rb = _assemble(scenario, vocab, res.tokens, res.log_probs, res.poses, [int(s.generate_state(1)[0]) for s in seeds])
    return (rb, res) if return_sim else rb


def rollout(
    ck: Checkpoint,
    scenario: Scenario,
    vocab: Vocabulary,
    sampling: SamplingSpec,
    n_token_steps: int = FUTURE_TOKEN_STEPS,
    rollout_index: int = 0,
) -> RolloutBatch:
    """A single closed-loop rollout (``R = 1``)."""
    check_vocab(ck, vocab)
    return _batch_rollouts(ck.params, ck.config, scenario, vocab, sampling, [rollout_index], n_token_steps)


def replay_rollouts(scenario: Scenario, vocab: Vocabulary, R: int = 1) -> RolloutBatch:
    """Degenerate policy that re-emits the rollout-anchored tokens of the log."""
    toks = logged_future_tokens(scenario, vocab)
    poses = np.stack(
        [
            np.stack(
                [
                    _detok(scenario.poses()[a, CURRENT_INDEX], toks[a], vocab.templates[m.kind])
                    for a, m in enumerate(scenario.metas)
                ]
            )
        ]
        * R
    )
    tokens = np.broadcast_to(toks, (R,) + toks.shape).copy()
    return _assemble(scenario, vocab, tokens, np.zeros(tokens.shape), poses, [0] * R)


def _detok(anchor, idx, templates):
    out = np.empty((len(idx) + 1, 3))
    out[0] = anchor
    for j, k in enumerate(idx):
        out[j + 1] = compose(out[j], templates[k])
    return out


def token_seqs(batch: RolloutBatch, r: int = 0) -> list[TokenSeq]:
    return [
        TokenSeq(aid, batch.token_poses[r, a, 0], batch.tokens[r, a], np.ones(batch.tokens.shape[-1], bool))
        for a, aid in enumerate(batch.agent_ids)
    ]


# --------------------------------------------------------------------------
# JSON-lines dump


def rollout_records(batch: RolloutBatch) -> list[dict]:
    recs = []
    for r in range(batch.n_rollouts):
        recs.append(
            {
                "scenario_id": batch.scenario_id,
                "rollout": r,
                "seed": batch.seeds[r] if batch.seeds else None,
                "agent_ids": [int(a) for a in batch.agent_ids],
                "kinds": list(batch.kinds),
                "tokens": batch.tokens[r].tolist(),
                "log_probs": batch.log_probs[r].tolist(),
                "tracks": {
                    str(aid): batch.tracks[r, a].tolist() for a, aid in enumerate(batch.agent_ids)
                },
            }
        )
    return recs


def write_rollouts(batches: list[RolloutBatch], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for b in batches:
            for rec in rollout_records(b):
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_rollouts(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
