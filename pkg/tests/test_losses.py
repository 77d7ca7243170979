import math

import numpy as np
import pytest
import torch

from trafficrft.policy_model import kl_per_token, log_probs_of, mpo_loss
from trafficrft.training import grpo_advantages, mpo_advantage


def test_kl_hand_values():
    assert kl_per_token(-1.3, -1.3) == 0.0
    # pi = 2 pi_ref  ->  x = pi_ref / pi = 0.5
    assert kl_per_token(math.log(0.4), math.log(0.2)) == pytest.approx(0.5 - math.log(0.5) - 1, abs=1e-15)
    assert 0.5 - math.log(0.5) - 1 == pytest.approx(0.19315, abs=1e-5)


def test_kl_torch_and_numpy_agree(rng):
    a, b = rng.normal(size=50), rng.normal(size=50)
    t = kl_per_token(torch.from_numpy(a), torch.from_numpy(b)).numpy()
    assert np.array_equal(t, kl_per_token(a, b))


@pytest.mark.parametrize("r", [0.70, 0.77, 0.80])
def test_mpo_advantage_grid(r):
    assert mpo_advantage(r, 0.77) == r - 0.77
    assert mpo_advantage(r, 0.77) == pytest.approx({0.70: -0.07, 0.77: 0.0, 0.80: 0.03}[r], abs=1e-15)


def test_mpo_loss_value_without_kl(rng):
    lp = np.log(rng.uniform(0.05, 1, (3, 4)))
    m = np.ones((3, 4), bool)
    # ratio is exactly 1 in value, so the loss is -A
    assert mpo_loss(lp, lp, 0.25, 0.0, m) == -0.25
    assert mpo_loss(lp, lp + 0.1, 0.25, 0.5, m) == pytest.approx(-(0.25 - 0.5 * (math.exp(0.1) - 1.1)), abs=1e-14)
    with pytest.raises(ValueError, match="empty mask"):
        mpo_loss(lp, lp, 0.1, 0.0, np.zeros((3, 4), bool))


def test_mpo_masked_mean(rng):
    lp, ref = rng.normal(size=8), rng.normal(size=8)
    m = np.array([1, 1, 0, 1, 0, 0, 1, 1], bool)
    adv = rng.normal(size=8)
    kl = np.exp(ref - lp) - (ref - lp) - 1
    expect = np.mean(-(adv - 0.3 * kl)[m])
    assert mpo_loss(lp, ref, adv, 0.3, m) == pytest.approx(expect, abs=1e-14)


def test_grpo_cases():
    a = grpo_advantages([0.6, 0.8])
    assert a == pytest.approx([-1.0, 1.0], abs=1e-6)
    assert np.all(grpo_advantages([0.5] * 6) == 0.0)
    r = np.random.default_rng(3).uniform(size=9)
    assert abs(grpo_advantages(r).sum()) < 1e-9


def test_log_probs_of_mask():
    lp = log_probs_of(np.zeros((2, 4)), np.array([1, 2]), np.array([True, False]))
    assert lp[1] == 0.0 and lp[0] == pytest.approx(-math.log(4))
