"""
Imagined rollouts: H steps of prior dynamics from posterior start states.

No observation is read while dreaming. Actions come from the current actor,
restricted by the predicted action mask; an agent whose predicted discount
falls below the threshold is absorbed and frozen for the rest of the rollout.
"""
import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from buffer import ReplayBuffer
from core import ConfigError, MambaConfig, ModelState, RngStream, flatten_latent, sample_categorical, unflatten_latent
from policy import Actor, Critic, PPOBatch, critic_inputs, gae, lambda_returns
from world_model import WorldModel


@dataclass
class StartStates:
    state: ModelState           # [M, n, ...]
    alive: torch.Tensor         # [M, n]
    neighbors: torch.Tensor     # [M, n, n]
    positions: np.ndarray       # [M, 2] (episode id, timestep)

    def __len__(self) -> int:
        return self.alive.shape[0]


def select_start_states(buffer: ReplayBuffer, model: WorldModel, count: int, length: int,
                        rng: RngStream) -> StartStates:
    """
    Sample `count` sequences and keep every position with a living agent.

    The posterior unroll over each sequence provides (h, z) at every
    position; positions where all agents are absorbing are dropped.
    """
    batch = buffer.sample_sequences(count, length, rng)
    with torch.no_grad():
        out = model.observe(batch, train_mode=False, rng=rng)
    keep = batch.alive.any(dim=-1)
    ids = np.broadcast_to(np.asarray(batch.episode_ids)[:, None], batch.timesteps.shape)
    positions = np.stack([ids, batch.timesteps], axis=-1)[keep.numpy()]
    return StartStates(
        state=ModelState(out.h[keep], out.z[keep]),
        alive=batch.alive[keep],
        neighbors=batch.neighbors[keep],
        positions=positions,
    )


@dataclass
class ImaginedTrajectory:
    h: torch.Tensor             # [B, H+1, n, D]   states s_0 .. s_H
    z: torch.Tensor             # [B, H+1, n, K*C]
    actions: torch.Tensor       # [B, H, n]
    log_probs: torch.Tensor     # [B, H, n]
    action_masks: torch.Tensor  # [B, H, n, A] thresholded masks actually used
    mask_probs: torch.Tensor    # [B, H, n, A]
    rewards: torch.Tensor       # [B, H, n]
    discounts: torch.Tensor     # [B, H, n]
    active: torch.Tensor        # [B, H, n] agent not yet absorbed at step k

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def states(self) -> ModelState:
        return ModelState(self.h, self.z)

    def to_ppo_batch(self, critic: Critic, config: MambaConfig) -> PPOBatch:
        B, H, n = self.actions.shape
        with torch.no_grad():
            values = critic(critic_inputs(self.z, self.h, config.critic_uses_hidden))
            rewards = self.rewards.transpose(0, 1)
            discounts = self.discounts.transpose(0, 1)
            values_t = values.transpose(0, 1)
            returns = lambda_returns(rewards, values_t, discounts, config.gae_lambda).transpose(0, 1)
            advantages = gae(rewards, values_t, discounts, config.gae_lambda).transpose(0, 1)
        features = torch.cat([self.z, self.h], dim=-1)[:, :H]
        critic_in = critic_inputs(self.z, self.h, config.critic_uses_hidden)[:, :H]
        return PPOBatch(
            actor_inputs=features.reshape(B * H, n, -1),
            critic_inputs=critic_in.reshape(B * H, n, -1),
            actions=self.actions.reshape(B * H, n),
            action_masks=self.action_masks.reshape(B * H, n, -1),
            log_probs=self.log_probs.reshape(B * H, n),
            advantages=advantages.reshape(B * H, n),
            returns=returns.reshape(B * H, n),
            active=self.active.reshape(B * H, n),
        )


def dream(model: WorldModel, actor: Actor, start: StartStates, horizon: int, rng: RngStream,
          config: Optional[MambaConfig] = None) -> ImaginedTrajectory:
    if horizon < 1:
        raise ConfigError(f"imagination horizon must be at least 1, got {horizon}")
    config = config or model.config
    threshold_mask = config.mask_threshold
    threshold_discount = config.discount_threshold
    n_actions = model.n_actions
    h, z = start.state.h.detach(), start.state.z.detach()
    alive = start.alive.bool().clone()
    neighbors = start.neighbors
    absorbing = torch.zeros(n_actions, dtype=torch.bool)
    absorbing[0] = True

    hs, zs = [h], [z]
    actions, log_probs, masks, mask_probs, rewards, discounts, active = [], [], [], [], [], [], []
    with torch.no_grad():
        for _ in range(horizon):
            mask_prob = model.decode_heads(h, z).mask_prob
            available = mask_prob >= threshold_mask
            available = available | ~available.any(dim=-1, keepdim=True)
            available = torch.where(alive.unsqueeze(-1), available, absorbing)
            out = actor.act(torch.cat([z, h], dim=-1), available, rng)
            action = torch.where(alive, out.action, torch.zeros_like(out.action))
            log_prob = torch.where(alive, out.log_prob, torch.zeros_like(out.log_prob))

            e = model.communicate(z, action, alive, neighbors, train_mode=False)
            h_next = model.recurrent_update(h, e)
            z_next = flatten_latent(sample_categorical(model.transition_prior(h_next), rng))
            h_next = torch.where(alive.unsqueeze(-1), h_next, h)
            z_next = torch.where(alive.unsqueeze(-1), z_next, z)

            heads = model.decode_heads(h_next, z_next)
            p_continue = heads.discount_prob
            continuing = alive & (p_continue >= threshold_discount)
            rewards.append(torch.where(alive, heads.reward_mean, torch.zeros_like(heads.reward_mean)))
            discounts.append(torch.where(continuing, config.gamma * p_continue, torch.zeros_like(p_continue)))
            actions.append(action)
            log_probs.append(log_prob)
            masks.append(available)
            mask_probs.append(mask_prob)
            active.append(alive)
            alive = continuing
            h, z = h_next, z_next
            hs.append(h)
            zs.append(z)

    def stack(items):
        return torch.stack(items, dim=1)

    return ImaginedTrajectory(
        h=stack(hs), z=stack(zs), actions=stack(actions), log_probs=stack(log_probs),
        action_masks=stack(masks), mask_probs=stack(mask_probs), rewards=stack(rewards),
        discounts=stack(discounts), active=stack(active),
    )


def dump_trajectory(trajectory: ImaginedTrajectory, path: str, n_groups: int, n_classes: int,
                    index: int = 0, update: Optional[int] = None) -> None:
    """Append one dreamed trajectory to a JSON-lines file, one line per step"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        for k in range(trajectory.horizon):
            z = trajectory.z[index, k]
            record = {
                "update": update,
                "step": k,
                "actions": trajectory.actions[index, k].tolist(),
                "rewards": [round(float(r), 6) for r in trajectory.rewards[index, k]],
                "discounts": [round(float(d), 6) for d in trajectory.discounts[index, k]],
                "alive": trajectory.active[index, k].tolist(),
                "latent": unflatten_latent(z, n_groups, n_classes).tolist(),
            }
            f.write(json.dumps(record) + "\n")
