"""
Shared-parameter PPO actor, attention critic and return estimators.

The actor only ever sees detached latents (or raw observations in the
model-free baseline), so no gradient reaches the world model from the
policy loss.
"""
import math
from dataclasses import dataclass, fields
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn

from communication import CommLayer
from core import ContractViolationError, InvalidInputError, MambaConfig, RngStream
from world_model import mlp


@dataclass
class PolicyOutput:
    logits: torch.Tensor
    action: torch.Tensor
    log_prob: torch.Tensor
    entropy: torch.Tensor

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)


def masked_logits(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = mask.bool()
    if not bool(mask.any(dim=-1).all()):
        raise ContractViolationError("action mask has no available action")
    return logits.masked_fill(~mask, float("-inf"))


def masked_entropy(logits: torch.Tensor) -> torch.Tensor:
    log_p = torch.log_softmax(logits, dim=-1)
    terms = torch.where(torch.isfinite(log_p), log_p.exp() * log_p, torch.zeros_like(log_p))
    return -terms.sum(dim=-1)


class Actor(nn.Module):
    """Masked categorical policy shared by every agent"""

    def __init__(self, in_size: int, n_actions: int, hidden: int, layers: int = 3):
        super().__init__()
        self.n_actions = n_actions
        self.net = mlp(in_size, hidden, n_actions, layers)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features)

    def act(self, features: torch.Tensor, mask: torch.Tensor, rng: Optional[RngStream] = None,
            greedy: bool = False) -> PolicyOutput:
        logits = masked_logits(self(features), mask)
        if greedy:
            action = logits.argmax(dim=-1)
        else:
            probs = torch.softmax(logits, dim=-1).reshape(-1, self.n_actions)
            generator = rng.torch if rng is not None else None
            action = torch.multinomial(probs, 1, generator=generator).reshape(logits.shape[:-1])
        log_prob = torch.log_softmax(logits, dim=-1).gather(-1, action.unsqueeze(-1)).squeeze(-1)
        return PolicyOutput(logits=logits, action=action, log_prob=log_prob, entropy=masked_entropy(logits))

    def evaluate(self, features: torch.Tensor, mask: torch.Tensor, actions: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        logits = masked_logits(self(features), mask)
        log_prob = torch.log_softmax(logits, dim=-1).gather(-1, actions.long().unsqueeze(-1)).squeeze(-1)
        return log_prob, masked_entropy(logits)


class Critic(nn.Module):
    """
    Per-agent value from attention over every agent's input row.

    No positional encoding, so permuting agents permutes the values.
    """

    def __init__(self, in_size: int, hidden: int, layers: int = 1):
        super().__init__()
        self.embed = nn.Linear(in_size, hidden)
        self.layers = nn.ModuleList(CommLayer(hidden, 2 * hidden, dropout=0.0) for _ in range(layers))
        self.head = mlp(hidden, hidden, 1)

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        x = self.embed(inputs)
        for layer in self.layers:
            x = layer(x)
        return self.head(x).squeeze(-1)


def critic_inputs(z: torch.Tensor, h: torch.Tensor, uses_hidden: bool) -> torch.Tensor:
    return torch.cat([z, h], dim=-1) if uses_hidden else z


# =============================================================================
# RETURNS
# =============================================================================

def _check_lengths(rewards, values, discounts) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    rewards = torch.as_tensor(rewards)
    values = torch.as_tensor(values, dtype=rewards.dtype)
    discounts = torch.as_tensor(discounts, dtype=rewards.dtype)
    if values.shape[0] != rewards.shape[0] + 1 or values.shape[1:] != rewards.shape[1:]:
        raise InvalidInputError(f"values need T+1={rewards.shape[0] + 1} rows, got {values.shape[0]}")
    if discounts.shape != rewards.shape:
        raise InvalidInputError(f"discounts shape {tuple(discounts.shape)} != rewards shape {tuple(rewards.shape)}")
    return rewards, values, discounts


def lambda_returns(rewards, values, discounts, lam: float) -> torch.Tensor:
    """V_t = r_t + d_t * ((1 - lam) * v_{t+1} + lam * V_{t+1}), with V_T = v_T. Time is dim 0."""
    rewards, values, discounts = _check_lengths(rewards, values, discounts)
    T = rewards.shape[0]
    out = torch.empty_like(rewards)
    nxt = values[T]
    for t in reversed(range(T)):
        nxt = rewards[t] + discounts[t] * ((1.0 - lam) * values[t + 1] + lam * nxt)
        out[t] = nxt
    return out


def gae(rewards, values, discounts, lam: float = 0.95) -> torch.Tensor:
    """A_t = delta_t + lam * d_t * A_{t+1}, delta_t = r_t + d_t v_{t+1} - v_t"""
    rewards, values, discounts = _check_lengths(rewards, values, discounts)
    T = rewards.shape[0]
    out = torch.empty_like(rewards)
    running = torch.zeros_like(values[T])
    for t in reversed(range(T)):
        delta = rewards[t] + discounts[t] * values[t + 1] - values[t]
        running = delta + lam * discounts[t] * running
        out[t] = running
    return out


def clipped_surrogate(ratio: torch.Tensor, advantage: torch.Tensor, eps: float = 0.2) -> torch.Tensor:
    """Per-sample PPO loss -min(r A, clip(r, 1-eps, 1+eps) A)"""
    ratio = torch.as_tensor(ratio)
    advantage = torch.as_tensor(advantage, dtype=ratio.dtype)
    return -torch.min(ratio * advantage, torch.clamp(ratio, 1.0 - eps, 1.0 + eps) * advantage)


# =============================================================================
# PPO
# =============================================================================

@dataclass
class PPOBatch:
    """Joint rows [N, n, ...]; one row is one step of all agents"""

    actor_inputs: torch.Tensor
    critic_inputs: torch.Tensor
    actions: torch.Tensor
    action_masks: torch.Tensor
    log_probs: torch.Tensor
    advantages: torch.Tensor
    returns: torch.Tensor
    active: torch.Tensor

    def __len__(self) -> int:
        return self.actions.shape[0]

    def index(self, rows: torch.Tensor) -> "PPOBatch":
        return PPOBatch(**{f.name: getattr(self, f.name)[rows] for f in fields(self)})

    @classmethod
    def concat(cls, batches) -> "PPOBatch":
        batches = list(batches)
        return cls(**{f.name: torch.cat([getattr(b, f.name) for b in batches]) for f in fields(cls)})


class PPOUpdater:
    """
    Clipped PPO on joint rows with annealed entropy bonus.

    Minibatches hold ceil(batch_size / n) joint rows, so about batch_size
    agent transitions each. The entropy coefficient decays after every
    minibatch step.
    """

    def __init__(self, actor: Actor, critic: Critic, config: MambaConfig):
        self.actor = actor
        self.critic = critic
        self.config = config
        self.actor_optimizer = torch.optim.Adam(actor.parameters(), lr=config.actor_lr)
        self.critic_optimizer = torch.optim.Adam(critic.parameters(), lr=config.critic_lr)
        self.entropy_coef = config.entropy_coef
        self.updates = 0

    def normalize(self, advantages: torch.Tensor, active: torch.Tensor) -> torch.Tensor:
        selected = advantages[active]
        if selected.numel() < 2:
            return advantages
        return (advantages - selected.mean()) / (selected.std() + 1e-8)

    def update(self, batch: PPOBatch, rng: Optional[RngStream] = None) -> Dict[str, float]:
        if len(batch) == 0 or not bool(batch.active.any()):
            raise InvalidInputError("no rollouts to learn from")
        active = batch.active.bool()
        advantages = self.normalize(batch.advantages, active) if self.config.normalize_advantages else batch.advantages
        batch = PPOBatch(batch.actor_inputs.detach(), batch.critic_inputs.detach(), batch.actions, batch.action_masks,
                         batch.log_probs.detach(), advantages.detach(), batch.returns.detach(), active)
        n_agents = batch.actions.shape[1]
        rows = max(1, math.ceil(self.config.batch_size / n_agents))
        generator = rng.torch if rng is not None else None
        totals = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "mean_ratio": 0.0, "clip_fraction": 0.0}
        steps = 0
        eps = self.config.clip_eps
        for _ in range(self.config.ppo_epochs):
            order = torch.randperm(len(batch), generator=generator)
            for start in range(0, len(batch), rows):
                mb = batch.index(order[start:start + rows])
                weight = mb.active.to(mb.advantages.dtype)
                denom = weight.sum().clamp(min=1.0)

                log_prob, entropy = self.actor.evaluate(mb.actor_inputs, mb.action_masks, mb.actions)
                ratio = torch.exp(log_prob - mb.log_probs)
                policy_loss = (clipped_surrogate(ratio, mb.advantages, eps) * weight).sum() / denom
                entropy_mean = (entropy * weight).sum() / denom
                actor_loss = policy_loss - self.entropy_coef * entropy_mean
                self.actor_optimizer.zero_grad()
                actor_loss.backward()
                nn.utils.clip_grad_norm_(self.actor.parameters(), self.config.grad_clip)
                self.actor_optimizer.step()

                values = self.critic(mb.critic_inputs)
                value_loss = (((values - mb.returns) ** 2) * weight).sum() / denom
                self.critic_optimizer.zero_grad()
                value_loss.backward()
                nn.utils.clip_grad_norm_(self.critic.parameters(), self.config.grad_clip)
                self.critic_optimizer.step()

                self.entropy_coef *= self.config.entropy_annealing
                with torch.no_grad():
                    clipped = ((ratio - 1.0).abs() > eps).to(weight.dtype)
                    totals["policy_loss"] += float(policy_loss)
                    totals["value_loss"] += float(value_loss)
                    totals["entropy"] += float(entropy_mean)
                    totals["mean_ratio"] += float((ratio * weight).sum() / denom)
                    totals["clip_fraction"] += float((clipped * weight).sum() / denom)
                steps += 1
        self.updates += 1
        metrics = {key: value / max(steps, 1) for key, value in totals.items()}
        metrics["entropy_coef"] = self.entropy_coef
        metrics["transitions"] = int(active.sum())
        return metrics

    def state_dict(self) -> Dict:
        return {
            "actor_optimizer": self.actor_optimizer.state_dict(),
            "critic_optimizer": self.critic_optimizer.state_dict(),
            "entropy_coef": self.entropy_coef,
            "updates": self.updates,
        }

    def load_state_dict(self, state: Dict) -> None:
        self.actor_optimizer.load_state_dict(state["actor_optimizer"])
        self.critic_optimizer.load_state_dict(state["critic_optimizer"])
        self.entropy_coef = state["entropy_coef"]
        self.updates = state["updates"]
