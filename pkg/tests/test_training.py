import numpy as np
import pytest

from trafficrft.policy_model import MPOLoss, adam_step, forward, grad, log_probs_of
from trafficrft.rollout import ConfigurationError, SamplingSpec, _batch_rollouts, rollout_catk
from trafficrft.training import (
    Runner,
    TrainConfig,
    TrainingSet,
    evaluate,
    mpo_advantage,
    rft_batch,
    rft_pool,
    split_indices,
    train_bc,
    train_rft_grpo,
    train_rft_mpo,
    train_sft_catk,
)


@pytest.fixture(scope="module")
def data(small_scenes, small_vocab, tiny_ck):
    return TrainingSet(small_scenes, small_vocab, tiny_ck.config)


def _same(p, q):
    return all(np.array_equal(p[k], q[k]) for k in p.arrays)


def test_bc_reduces_loss_and_is_deterministic(data, tiny_ck):
    cfg = TrainConfig("bc", epochs=4, lr=3e-3, batch_size=4)
    a, log_a = train_bc(data, cfg, tiny_ck)
    b, _ = train_bc(data, cfg, tiny_ck)
    assert log_a["final_loss"] < log_a["initial_loss"]
    assert _same(a.params, b.params) and a.stage_history == ["bc"]
    assert len(log_a["epochs"]) == 4


def test_stage_mismatch(data, tiny_ck):
    with pytest.raises(ConfigurationError):
        train_bc(data, TrainConfig("sft"), tiny_ck)
    with pytest.raises(ConfigurationError, match="unknown stage"):
        TrainConfig("ppo")
    with pytest.raises(ConfigurationError, match="unknown stage config keys"):
        TrainConfig.from_dict({"stage": "bc", "epochz": 3})


def test_sft_k_too_large(data, tiny_ck):
    with pytest.raises(ValueError, match="exceeds the vocabulary"):
        train_sft_catk(data, TrainConfig("sft", K=tiny_ck.config.vocab_max + 1), tiny_ck)


def test_sft_warns_without_bc_and_trains(data, tiny_ck):
    with pytest.warns(UserWarning, match="without a bc stage"):
        ck, log = train_sft_catk(data, TrainConfig("sft", epochs=1, K=4, batch_size=6), tiny_ck)
    assert ck.stage_history == ["sft"] and np.isfinite(log["epochs"][0]["loss"])
    assert not _same(ck.params, tiny_ck.params)


def test_catk_k1_targets_are_argmax(data, tiny_ck):
    seqs = [data.seq(i) for i in range(3)]
    res = rollout_catk(tiny_ck.params, tiny_ck.config, data.vocab, seqs, K=1)
    n = [len(s.kinds) for s in seqs]
    for b in range(3):
        assert np.array_equal(res.tokens[b, : n[b]], res.logits[b, : n[b]].argmax(-1))


def test_mpo_positive_advantage_raises_sampled_logp(data, tiny_ck):
    cfg = tiny_ck.config
    sc = data.scenarios[0]
    _, res = _batch_rollouts(tiny_ck.params, cfg, sc, data.vocab, SamplingSpec(seed=1), range(4), return_sim=True)
    mask = np.broadcast_to(res.active[..., None], res.tokens.shape).copy()
    before = log_probs_of(forward(tiny_ck.params, res.batch, cfg), res.tokens)[mask].mean()
    spec = MPOLoss(res.tokens, res.log_probs, np.array(0.5), 0.0, mask)
    _, g = grad(tiny_ck.params, res.batch, cfg, spec)
    p2, _ = adam_step(tiny_ck.params, g, 1e-3)
    after = log_probs_of(forward(p2, res.batch, cfg), res.tokens)[mask].mean()
    assert after > before


def test_zero_iterations_keeps_params(data, tiny_ck):
    ck, log = train_rft_mpo(data, TrainConfig("rft_mpo", iterations=0), tiny_ck)
    assert _same(ck.params, tiny_ck.params)
    assert ck.stage_history == [*tiny_ck.stage_history, "rft_mpo"] and log["iterations"] == []


def test_rft_reference_frozen_and_logged(data, tiny_ck):
    snapshot = tiny_ck.params.copy()
    cfg = TrainConfig("rft_mpo", iterations=3, batch_size=2, R_rft=2, lr=1e-2, alpha=0.5)
    ck, log = train_rft_mpo(data, cfg, tiny_ck)
    assert _same(tiny_ck.params, snapshot)
    its = log["iterations"]
    # the first update starts from the reference itself
    assert its[0]["kl_mean"] == 0.0
    assert its[-1]["kl_mean"] > 0.0
    for rec in its:
        assert rec["advantage_mean"] == pytest.approx(rec["reward_mean"] - 0.5, abs=1e-12)


def test_grpo_groups_sum_to_zero(data, tiny_ck):
    cfg = TrainConfig("rft_grpo", iterations=2, batch_size=2, G=3)
    ck, log = train_rft_grpo(data, cfg, tiny_ck)
    sums = [s for rec in log["iterations"] for s in rec["group_advantage_sums"]]
    assert len(sums) == 4 and max(abs(s) for s in sums) < 1e-9
    with pytest.raises(ConfigurationError):
        TrainConfig("rft_grpo", G=1)


def test_mpo_advantage_values():
    assert mpo_advantage(0.77, 0.77) == 0.0
    assert mpo_advantage(0.80, 0.77) == pytest.approx(0.03)
    assert mpo_advantage(0.70, 0.77) == pytest.approx(-0.07)


def test_rft_pool_cycles():
    cfg = TrainConfig("rft_mpo", rft_pool=12, batch_size=3)
    pool = rft_pool(40, cfg)
    assert len(pool) == 12 and len(set(pool)) == 12
    win = lambda start: sorted(i for it in range(start, start + 4) for i in rft_batch(pool, it, 3))
    assert win(0) == sorted(pool) == win(8)
    assert rft_pool(40, TrainConfig("rft_mpo")) == rft_pool(40, TrainConfig("rft_mpo"))
    assert len(rft_pool(40, TrainConfig("rft_mpo"))) == 40


def test_split_indices():
    s = split_indices(100, 0.02, seed=4)
    assert len(s) == 2 and s == split_indices(100, 0.02, seed=4)
    assert split_indices(10, 1.0) == list(range(10))
    assert len(split_indices(7, 0.5)) == 4
    with pytest.raises(ValueError):
        split_indices(10, 0.0)
    with pytest.raises(ValueError):
        split_indices(0, 0.5)


def test_evaluate_independent_of_workers(small_scenes, small_vocab, tiny_ck):
    sp = SamplingSpec(seed=2)
    a, ra = evaluate(tiny_ck, small_scenes[:4], small_vocab, 2, sp)
    with Runner(2) as runner:
        b, rb = evaluate(tiny_ck, small_scenes[:4], small_vocab, 2, sp, runner=runner)
    assert a.to_dict() == b.to_dict()
    assert [r.to_dict() for r in ra] == [r.to_dict() for r in rb]
