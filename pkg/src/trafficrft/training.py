"""Training stages: behaviour cloning, CAT-K fine-tuning, MPO and a GRPO baseline.

Every stage maps ``(data, TrainConfig, checkpoint) -> (checkpoint, log)`` and
is deterministic for fixed seeds. Scenario-level work (rollouts, rewards,
evaluation) goes through a :class:`Runner`, whose worker count never changes
the numbers: each task is self-contained and results are consumed in input
order.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import torch

from .policy_model import (
    AdamState,
    Checkpoint,
    CELoss,
    ForwardBatch,
    ModelConfig,
    MPOLoss,
    Parameters,
    adam_step,
    ce_loss,
    concat_batches,
    forward,
    grad,
    kl_per_token,
    log_probs_of,
    make_batch,
)
from .realism_metrics import MetricReport, aggregate, logged_features, score_scenario
from .rollout import (
    ConfigurationError,
    SamplingSpec,
    _batch_rollouts,
    check_vocab,
    future_ground_truth,
    gt_sequence,
    rollout_catk,
)
from .scenario import Scenario
from .tokenizer import Vocabulary

log = logging.getLogger(__name__)

STAGES = ("bc", "sft", "rft_mpo", "rft_grpo")


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    epochs: int = 1
    iterations: int = 0
    lr: float = 1e-3
    batch_size: int = 8
    alpha: float = 0.77
    beta: float = 0.04
    K: int = 32
    R_rft: int = 8
    R_eval: int = 32
    G: int = 8
    rft_pool: int = 0
    temperature: float = 1.0
    top_k: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}; expected one of {', '.join(STAGES)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if self.beta < 0:
            raise ConfigurationError("beta must be >= 0")
        if self.K < 1:
            raise ConfigurationError("K must be >= 1")
        if self.batch_size < 1 or self.epochs < 0 or self.iterations < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs/iterations >= 0")
        if self.rft_pool < 0:
            raise ConfigurationError("rft_pool must be >= 0 (0 uses every scenario)")
        if self.R_rft < 1 or self.R_eval < 1:
            raise ConfigurationError("rollout counts must be >= 1")
        if self.stage == "rft_grpo" and self.G < 2:
            raise ConfigurationError("GRPO needs a group size G >= 2")
        if not self.lr > 0 or not self.temperature > 0:
            raise ConfigurationError("lr and temperature must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown stage config keys: {', '.join(sorted(extra))}")
        if "stage" not in d:
            raise ConfigurationError("stage config needs a 'stage' key")
        return cls(**d)

    @property
    def sampling(self) -> SamplingSpec:
        return SamplingSpec(self.temperature, self.top_k, False, self.seed)


# --------------------------------------------------------------------------
# data and workers


class TrainingSet:
    """Scenarios plus cached teacher-forcing sequences and batches."""

    def __init__(self, scenarios: list[Scenario], vocab: Vocabulary, cfg: ModelConfig):
        if not scenarios:
            raise ValueError("empty scenario set")
        self.scenarios = sorted(scenarios, key=lambda s: s.scenario_id)
        self.vocab = vocab
        self.cfg = cfg
        self._seqs: dict[int, object] = {}
        self._batches: dict[int, ForwardBatch] = {}

    def __len__(self) -> int:
        return len(self.scenarios)

    def seq(self, i: int):
        if i not in self._seqs:
            self._seqs[i] = gt_sequence(self.scenarios[i], self.vocab)
        return self._seqs[i]

    def tf_batch(self, idx) -> ForwardBatch:
        for i in idx:
            if i not in self._batches:
                self._batches[i] = make_batch([self.seq(i)], self.cfg)
        return concat_batches([self._batches[i] for i in idx])


def _init_worker():
    torch.set_num_threads(1)


class Runner:
    """Ordered map over scenario tasks, in-process or on a process pool."""

    def __init__(self, workers: int = 1):
        self.workers = max(1, int(workers))
        self._pool = None

    def __enter__(self):
        if self.workers > 1:
            self._pool = ProcessPoolExecutor(self.workers, initializer=_init_worker)
        return self

    def __exit__(self, *exc):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def map(self, fn, items):
        items = list(items)
        if self._pool is None or len(items) < 2:
            return [fn(x) for x in items]
        return list(self._pool.map(fn, items))


SERIAL = Runner(1)


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def _pad_agents(arrays: list[np.ndarray]) -> np.ndarray:
    A = max(a.shape[1] for a in arrays)
    out = []
    for a in arrays:
        pad = A - a.shape[1]
        out.append(np.pad(a, [(0, 0), (0, pad)] + [(0, 0)] * (a.ndim - 2)) if pad else a)
    return np.concatenate(out)


def _fresh_optimizer(params: Parameters) -> AdamState:
    return AdamState.zeros_like(params)


def _fsum_mean(values, weights=None) -> float:
    values = list(values)
    if not values:
        return float("nan")
    if weights is None:
        return math.fsum(values) / len(values)
    weights = list(weights)
    return math.fsum(v * w for v, w in zip(values, weights)) / math.fsum(weights)


# --------------------------------------------------------------------------
# behaviour cloning


def _future(batch: ForwardBatch, cfg: ModelConfig):
    H = cfg.history_token_steps
    return batch.tokens[:, :, H:], batch.token_valid[:, :, H:]


def dataset_ce(params, data: TrainingSet, batch_size: int = 32) -> float:
    """Token-weighted cross-entropy of the logged future tokens over the whole set."""
    total, count = [], 0
    for s in range(0, len(data), batch_size):
        batch = data.tf_batch(range(s, min(len(data), s + batch_size)))
        targets, mask = _future(batch, data.cfg)
        if not mask.any():
            continue
        total.append(ce_loss(forward(params, batch, data.cfg), targets, mask, reduction="sum"))
        count += int(mask.sum())
    return math.fsum(total) / count


def _expect(config: TrainConfig, *stages):
    if config.stage not in stages:
        raise ConfigurationError(f"stage {config.stage!r} given to a {'/'.join(stages)} trainer")


def train_bc(data: TrainingSet, config: TrainConfig, ck: Checkpoint):
    """Teacher-forced next-token cross-entropy on gt-anchored tokens."""
    _expect(config, "bc")
    check_vocab(ck, data.vocab)
    cfg = ck.config
    params, opt = ck.params, _fresh_optimizer(ck.params)
    out = {"stage": "bc", "initial_loss": dataset_ce(params, data), "epochs": []}
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(data))
        losses, counts = [], []
        for s in range(0, len(order), config.batch_size):
            batch = data.tf_batch(sorted(order[s : s + config.batch_size]))
            targets, mask = _future(batch, cfg)
            if not mask.any():
                continue
            loss, g = grad(params, batch, cfg, CELoss(targets, mask))
            params, opt = adam_step(params, g, config.lr, state=opt)
            losses.append(loss)
            counts.append(int(mask.sum()))
        out["epochs"].append({"epoch": epoch, "loss": _fsum_mean(losses, counts)})
        log.info("bc epoch %d loss %.4f", epoch, out["epochs"][-1]["loss"])
    out["final_loss"] = dataset_ce(params, data)
    return ck.with_stage("bc", params, opt), out


# --------------------------------------------------------------------------
# CAT-K closed-loop fine-tuning


def topk_violations(logits: np.ndarray, chosen: np.ndarray, mask: np.ndarray, K: int) -> int:
    """Number of masked positions whose chosen token is outside the top ``K``."""
    picked = np.take_along_axis(logits, chosen[..., None], -1)
    rank = (logits > picked).sum(-1)
    return int(((rank >= K) & mask).sum())


def train_sft_catk(data: TrainingSet, config: TrainConfig, ck: Checkpoint):
    """Cross-entropy toward CAT-K recovery tokens of the current policy's own rollouts."""
    _expect(config, "sft")
    check_vocab(ck, data.vocab)
    cfg = ck.config
    if config.K > cfg.vocab_max:
        raise ValueError(f"K = {config.K} exceeds the vocabulary size {cfg.vocab_max}")
    if "bc" not in ck.stage_history:
        warnings.warn("CAT-K fine-tuning a checkpoint without a bc stage", stacklevel=2)
    params, opt = ck.params, _fresh_optimizer(ck.params)
    out = {"stage": "sft", "K": config.K, "epochs": []}
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(data))
        losses, counts = [], []
        for s in range(0, len(order), config.batch_size):
            idx = sorted(order[s : s + config.batch_size])
            seqs = [data.seq(i) for i in idx]
            res = rollout_catk(params, cfg, data.vocab, seqs, config.K)
            _, gt_valid = future_ground_truth(seqs, res.tokens.shape[1], res.tokens.shape[2])
            # steps without a logged target only re-assert the argmax; leave them out
            mask = res.active[..., None] & gt_valid
            bad = topk_violations(res.logits, res.tokens, mask, config.K)
            if bad:
                raise RuntimeError(f"CAT-K chose {bad} tokens outside the policy top-{config.K}")
            if not mask.any():
                continue
            loss, g = grad(params, res.batch, cfg, CELoss(res.tokens, mask))
            params, opt = adam_step(params, g, config.lr, state=opt)
            losses.append(loss)
            counts.append(int(mask.sum()))
        out["epochs"].append({"epoch": epoch, "loss": _fsum_mean(losses, counts)})
        log.info("sft epoch %d loss %.4f", epoch, out["epochs"][-1]["loss"])
    return ck.with_stage("sft", params, opt), out


# --------------------------------------------------------------------------
# reinforcement fine-tuning


def mpo_advantage(r: float, alpha: float) -> float:
    """Reward minus the fixed empirical threshold."""
    return r - alpha


def grpo_advantages(rewards) -> np.ndarray:
    """Group-standardized rewards (population std, guarded by 1e-8)."""
    r = np.asarray(rewards, dtype=float)
    return (r - r.mean()) / (r.std() + 1e-8)


@dataclass
class RolloutTask:
    params: dict
    cfg: ModelConfig
    scenario: Scenario
    vocab: Vocabulary
    sampling: SamplingSpec
    n_rollouts: int
    per_rollout_reward: bool = False


@dataclass
class RolloutOutcome:
    scenario_id: str
    rewards: np.ndarray  # (1,) or (R,)
    tokens: np.ndarray
    log_probs: np.ndarray
    active: np.ndarray
    batch: ForwardBatch


def run_rollout_task(task: RolloutTask) -> RolloutOutcome:
    """Sampled rollouts of one scene and their Realism Meta reward(s)."""
    params = Parameters(task.params)
    rb, res = _batch_rollouts(
        params, task.cfg, task.scenario, task.vocab, task.sampling, range(task.n_rollouts), return_sim=True
    )
    logged = logged_features(task.scenario)
    if task.per_rollout_reward:
        rewards = np.array(
            [
                score_scenario(task.scenario, rb.tracks[r : r + 1], rb.valid[r : r + 1], logged=logged).realism_meta
                for r in range(rb.n_rollouts)
            ]
        )
    else:
        rewards = np.array([score_scenario(task.scenario, rb.tracks, rb.valid, logged=logged).realism_meta])
    return RolloutOutcome(task.scenario.scenario_id, rewards, res.tokens, res.log_probs, res.active, res.batch)


def _frozen_copy(params: Parameters) -> Parameters:
    # a private copy that no code path ever updates
    return params.copy()


def rft_pool(n: int, config: TrainConfig) -> list[int]:
    """Seeded subset of scenario indices visited by reinforcement fine-tuning."""
    order = np.random.default_rng([config.seed, n]).permutation(n)
    size = n if config.rft_pool == 0 else min(config.rft_pool, n)
    return order[:size].tolist()


def rft_batch(pool: list[int], it: int, batch_size: int) -> list[int]:
    """Iteration ``it`` takes the next ``batch_size`` pool entries, cycling.

    With a pool of ``w * batch_size`` scenarios every window of ``w``
    consecutive iterations visits each pool scenario exactly once.
    """
    b = min(batch_size, len(pool))
    return sorted(pool[(it * b + j) % len(pool)] for j in range(b))


def _rft(data: TrainingSet, config: TrainConfig, ck: Checkpoint, runner: Runner, grpo: bool):
    check_vocab(ck, data.vocab)
    cfg = ck.config
    params, opt = ck.params, _fresh_optimizer(ck.params)
    ref = _frozen_copy(ck.params)
    R = config.G if grpo else config.R_rft
    out = {"stage": config.stage, "alpha": config.alpha, "beta": config.beta, "iterations": []}
    pool = rft_pool(len(data), config)
    for it in range(config.iterations):
        idx = rft_batch(pool, it, config.batch_size)
        sampling = replace(config.sampling, seed=_derived_seed(config.seed, it))
        tasks = [RolloutTask(params.arrays, cfg, data.scenarios[i], data.vocab, sampling, R, grpo) for i in idx]
        outcomes = []
        for o in runner.map(run_rollout_task, tasks):
            if not np.all(np.isfinite(o.rewards)):
                log.warning("skipping %s: non-finite reward %s", o.scenario_id, o.rewards)
                continue
            outcomes.append(o)
        rec = {"iteration": it, "scenarios": [o.scenario_id for o in outcomes]}
        if not outcomes:
            out["iterations"].append(rec)
            continue
        if grpo:
            advs = [grpo_advantages(o.rewards) for o in outcomes]
            rec["group_advantage_sums"] = [float(a.sum()) for a in advs]
            row_adv = np.concatenate(advs)
        else:
            advs = [np.full(R, mpo_advantage(float(o.rewards[0]), config.alpha)) for o in outcomes]
            row_adv = np.concatenate(advs)
        batch = concat_batches([o.batch for o in outcomes])
        sampled = _pad_agents([o.tokens for o in outcomes])
        logp_old = _pad_agents([o.log_probs for o in outcomes])
        active = _pad_agents([o.active for o in outcomes])
        mask = np.broadcast_to(active[..., None], sampled.shape).copy()
        logp_ref = log_probs_of(forward(ref, batch, cfg), sampled)
        spec = MPOLoss(sampled, logp_ref, row_adv[:, None, None], config.beta, mask)
        loss, g = grad(params, batch, cfg, spec)
        params, opt = adam_step(params, g, config.lr, state=opt)
        rewards = np.concatenate([o.rewards for o in outcomes])
        rec.update(
            reward_mean=_fsum_mean(rewards.tolist()),
            advantage_mean=_fsum_mean(row_adv.tolist()),
            kl_mean=_fsum_mean(kl_per_token(logp_old, logp_ref)[mask].tolist()),
            loss=loss,
        )
        out["iterations"].append(rec)
        log.info("%s it %d reward %.4f kl %.5f", config.stage, it, rec["reward_mean"], rec["kl_mean"])
    return ck.with_stage(config.stage, params, opt), out


def train_rft_mpo(data: TrainingSet, config: TrainConfig, ck: Checkpoint, runner: Runner = SERIAL):
    """Reward-thresholded policy gradient with a per-token KL pull toward the frozen start policy."""
    _expect(config, "rft_mpo")
    return _rft(data, config, ck, runner, grpo=False)


def train_rft_grpo(data: TrainingSet, config: TrainConfig, ck: Checkpoint, runner: Runner = SERIAL):
    """Same update as MPO with group-standardized per-rollout advantages."""
    _expect(config, "rft_grpo")
    return _rft(data, config, ck, runner, grpo=True)


def run_stage(data: TrainingSet, config: TrainConfig, ck: Checkpoint, runner: Runner = SERIAL):
    if config.stage == "bc":
        return train_bc(data, config, ck)
    if config.stage == "sft":
        return train_sft_catk(data, config, ck)
    if config.stage == "rft_mpo":
        return train_rft_mpo(data, config, ck, runner)
    return train_rft_grpo(data, config, ck, runner)


def moving_average(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    return np.convolve(v, np.ones(window) / window, mode="valid")


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalTask:
    params: dict
    cfg: ModelConfig
    scenario: Scenario
    vocab: Vocabulary
    sampling: SamplingSpec
    n_rollouts: int


def run_eval_task(task: EvalTask) -> MetricReport:
    rb = _batch_rollouts(Parameters(task.params), task.cfg, task.scenario, task.vocab, task.sampling, range(task.n_rollouts))
    return score_scenario(task.scenario, rb.tracks, rb.valid)


def split_indices(n: int, fraction: float, seed: int = 0) -> list[int]:
    """``ceil(fraction * n)`` indices drawn without replacement, sorted."""
    if not 0 < fraction <= 1:
        raise ValueError("split fraction must lie in (0, 1]")
    if n == 0:
        raise ValueError("empty evaluation split")
    k = max(1, math.ceil(fraction * n - 1e-9))
    if k >= n:
        return list(range(n))
    return sorted(np.random.default_rng(seed).choice(n, size=k, replace=False).tolist())


def evaluate(
    ck: Checkpoint,
    scenarios: list[Scenario],
    vocab: Vocabulary,
    R_eval: int = 32,
    sampling: SamplingSpec = SamplingSpec(),
    split_fraction: float = 1.0,
    split_seed: int = 0,
    runner: Runner = SERIAL,
):
    """Closed-loop rollouts on (a seeded subset of) ``scenarios``; returns ``(aggregate, per-scenario reports)``."""
    check_vocab(ck, vocab)
    if not scenarios:
        raise ValueError("empty evaluation split")
    scenarios = sorted(scenarios, key=lambda s: s.scenario_id)
    chosen = [scenarios[i] for i in split_indices(len(scenarios), split_fraction, split_seed)]
    tasks = [EvalTask(ck.params.arrays, ck.config, sc, vocab, sampling, R_eval) for sc in chosen]
    reports = runner.map(run_eval_task, tasks)
    return aggregate(reports), reports
