"""
Unit tests for the actor, the attention critic, return estimators and PPO.
"""
import numpy as np
import pytest
import torch

import sys
sys.path.insert(0, '.')
from core import ContractViolationError, InvalidInputError, RngStream
from policy import (
    Actor, Critic, PPOBatch, PPOUpdater, clipped_surrogate, critic_inputs, gae, lambda_returns, masked_entropy,
    masked_logits,
)
from tests.fixtures import chi_square, chi_square_critical, tiny_config


def _ppo_batch(rows: int = 16, n_agents: int = 2, in_size: int = 6, n_actions: int = 3, seed: int = 0) -> PPOBatch:
    g = torch.Generator().manual_seed(seed)
    return PPOBatch(
        actor_inputs=torch.randn(rows, n_agents, in_size, generator=g),
        critic_inputs=torch.randn(rows, n_agents, in_size, generator=g),
        actions=torch.randint(0, n_actions, (rows, n_agents), generator=g),
        action_masks=torch.ones(rows, n_agents, n_actions, dtype=torch.bool),
        log_probs=torch.full((rows, n_agents), float(-np.log(n_actions))),
        advantages=torch.randn(rows, n_agents, generator=g),
        returns=torch.randn(rows, n_agents, generator=g),
        active=torch.ones(rows, n_agents, dtype=torch.bool),
    )


# =============================================================================
# ACTOR
# =============================================================================

@pytest.mark.unit
def test_masked_logits_and_entropy():
    logits = torch.zeros(2, 4)
    mask = torch.tensor([[True, True, False, False], [True, True, True, True]])
    masked = masked_logits(logits, mask)
    assert torch.isinf(masked[0, 2:]).all()
    entropy = masked_entropy(masked)
    assert float(entropy[0]) == pytest.approx(np.log(2))
    assert float(entropy[1]) == pytest.approx(np.log(4))


@pytest.mark.unit
def test_empty_mask_is_a_contract_violation():
    with pytest.raises(ContractViolationError):
        masked_logits(torch.zeros(2, 3), torch.tensor([[True, False, False], [False, False, False]]))


@pytest.mark.unit
def test_actor_never_picks_masked_actions():
    torch.manual_seed(0)
    actor = Actor(6, 4, 16)
    features = torch.randn(200, 6)
    mask = torch.zeros(200, 4, dtype=torch.bool)
    mask[:, 1] = True
    mask[::2, 3] = True
    out = actor.act(features, mask, RngStream(0))
    assert mask.gather(-1, out.action.unsqueeze(-1)).all()
    greedy = actor.act(features, mask, greedy=True)
    assert mask.gather(-1, greedy.action.unsqueeze(-1)).all()


@pytest.mark.unit
def test_masked_action_frequencies_follow_the_policy():
    torch.manual_seed(0)
    actor = Actor(6, 5, 16)
    draws = 20_000
    features = torch.randn(1, 6).expand(draws, 6)
    mask = torch.tensor([True, False, True, True, False]).expand(draws, 5)
    out = actor.act(features, mask, RngStream(21, "frequencies"))
    counts = torch.bincount(out.action, minlength=5).numpy()
    assert counts[1] == 0 and counts[4] == 0
    allowed = [0, 2, 3]
    probs = out.probs[0, allowed].detach().double().numpy()
    assert np.isclose(probs.sum(), 1.0)
    assert chi_square(counts[allowed], probs) < chi_square_critical(len(allowed) - 1)


@pytest.mark.unit
def test_actor_sampling_is_seeded_and_consistent():
    torch.manual_seed(0)
    actor = Actor(6, 3, 16)
    features = torch.randn(10, 6)
    mask = torch.ones(10, 3, dtype=torch.bool)
    a = actor.act(features, mask, RngStream(4, "act"))
    b = actor.act(features, mask, RngStream(4, "act"))
    assert torch.equal(a.action, b.action)
    log_prob, entropy = actor.evaluate(features, mask, a.action)
    assert torch.allclose(log_prob, a.log_prob)
    assert torch.allclose(entropy, a.entropy)


# =============================================================================
# CRITIC
# =============================================================================

@pytest.mark.unit
def test_critic_is_permutation_equivariant():
    torch.manual_seed(1)
    critic = Critic(8, 16).eval()
    inputs = torch.randn(5, 3, 8)
    perm = torch.tensor([2, 0, 1])
    assert torch.allclose(critic(inputs)[:, perm], critic(inputs[:, perm]), atol=1e-5)
    assert critic(inputs).shape == (5, 3)


@pytest.mark.unit
def test_critic_inputs_optionally_append_hidden():
    z, h = torch.ones(2, 3, 4), torch.zeros(2, 3, 5)
    assert critic_inputs(z, h, False).shape == (2, 3, 4)
    assert critic_inputs(z, h, True).shape == (2, 3, 9)


# =============================================================================
# RETURNS
# =============================================================================

@pytest.mark.unit
def test_lambda_returns_by_hand():
    rewards = torch.tensor([[1.0], [2.0]])
    values = torch.tensor([[0.5], [1.0], [4.0]])
    discounts = torch.tensor([[0.9], [0.5]])
    # V_1 = 2 + 0.5 * 4 = 4; V_0 = 1 + 0.9 * (0.5 * 1 + 0.5 * 4) = 3.25
    out = lambda_returns(rewards, values, discounts, 0.5)
    assert out[:, 0].tolist() == pytest.approx([3.25, 4.0])


@pytest.mark.unit
def test_lambda_one_is_discounted_return_and_zero_is_td():
    rewards = torch.tensor([[1.0], [1.0], [1.0]])
    values = torch.tensor([[0.0], [2.0], [3.0], [10.0]])
    discounts = torch.full((3, 1), 0.5)
    mc = lambda_returns(rewards, values, discounts, 1.0)
    assert float(mc[0, 0]) == pytest.approx(1 + 0.5 * (1 + 0.5 * (1 + 0.5 * 10)))
    td = lambda_returns(rewards, values, discounts, 0.0)
    assert td[:, 0].tolist() == pytest.approx([2.0, 2.5, 6.0])


@pytest.mark.unit
def test_zero_discount_cuts_the_return():
    rewards = torch.tensor([[1.0], [5.0]])
    values = torch.tensor([[0.0], [7.0], [9.0]])
    discounts = torch.tensor([[0.0], [0.9]])
    assert float(lambda_returns(rewards, values, discounts, 0.95)[0, 0]) == 1.0
    assert float(gae(rewards, values, discounts)[0, 0]) == 1.0


@pytest.mark.unit
def test_gae_plus_value_equals_lambda_return():
    g = torch.Generator().manual_seed(0)
    rewards = torch.randn(7, 3, generator=g, dtype=torch.float64)
    values = torch.randn(8, 3, generator=g, dtype=torch.float64)
    discounts = torch.rand(7, 3, generator=g, dtype=torch.float64)
    advantages = gae(rewards, values, discounts, 0.9)
    returns = lambda_returns(rewards, values, discounts, 0.9)
    assert torch.allclose(advantages + values[:-1], returns, atol=1e-10)


@pytest.mark.unit
def test_return_length_mismatch():
    with pytest.raises(InvalidInputError):
        lambda_returns(torch.zeros(3, 1), torch.zeros(3, 1), torch.zeros(3, 1), 0.9)
    with pytest.raises(InvalidInputError):
        gae(torch.zeros(3, 1), torch.zeros(4, 1), torch.zeros(2, 1))


# =============================================================================
# PPO
# =============================================================================

@pytest.mark.unit
@pytest.mark.parametrize("ratio,advantage,expected", [
    (1.5, 1.0, -1.2),
    (0.5, -1.0, 0.8),
    (1.1, 2.0, -2.2),
    (0.5, 1.0, -0.5),
    (1.5, -1.0, 1.5),
])
def test_clipped_surrogate(ratio, advantage, expected):
    assert float(clipped_surrogate(torch.tensor(ratio), torch.tensor(advantage))) == pytest.approx(expected)


@pytest.mark.unit
def test_ppo_update_anneals_entropy_and_reports():
    config = tiny_config(batch_size=8, ppo_epochs=2)
    torch.manual_seed(0)
    updater = PPOUpdater(Actor(6, 3, 16), Critic(6, 16), config)
    metrics = updater.update(_ppo_batch(rows=16), RngStream(0))
    # 16 joint rows of 2 agents in minibatches of 4 rows, twice
    steps = 2 * 4
    assert updater.entropy_coef == pytest.approx(config.entropy_coef * config.entropy_annealing ** steps)
    assert metrics["transitions"] == 32
    assert metrics["mean_ratio"] == pytest.approx(1.0, abs=0.5)
    assert updater.updates == 1


@pytest.mark.unit
def test_ppo_critic_fits_returns():
    config = tiny_config(batch_size=64, ppo_epochs=1, critic_lr=1e-2)
    torch.manual_seed(0)
    updater = PPOUpdater(Actor(6, 3, 16), Critic(6, 16), config)
    batch = _ppo_batch(rows=32)
    before = float(((updater.critic(batch.critic_inputs) - batch.returns) ** 2).mean())
    for k in range(60):
        updater.update(batch, RngStream(k))
    after = float(((updater.critic(batch.critic_inputs) - batch.returns) ** 2).mean())
    assert after < before


@pytest.mark.unit
def test_ppo_requires_active_rows():
    updater = PPOUpdater(Actor(6, 3, 16), Critic(6, 16), tiny_config())
    batch = _ppo_batch(rows=4)
    batch.active = torch.zeros_like(batch.active)
    with pytest.raises(InvalidInputError, match="no rollouts"):
        updater.update(batch)


@pytest.mark.unit
def test_ppo_state_round_trip():
    config = tiny_config()
    updater = PPOUpdater(Actor(6, 3, 16), Critic(6, 16), config)
    updater.update(_ppo_batch(), RngStream(0))
    other = PPOUpdater(updater.actor, updater.critic, config)
    other.load_state_dict(updater.state_dict())
    assert other.entropy_coef == updater.entropy_coef
    assert other.updates == 1
