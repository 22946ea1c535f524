"""
Multi-agent world model.

Per agent and step:
    e_t   = CommBlock(z_{t-1}, a_{t-1})        the only cross-agent channel
    h_t   = GRU(h_{t-1}, e_t)
    z_t   ~ q(z | h_t, o_t)                     posterior, 32 x 32 categorical
    z^_t  ~ p(z | h_t)                          prior, used while dreaming
    heads on (h_t, z_t): observation, reward, discount, action mask, a_{t-1}

Loss (per agent-step means, unit weights):
    obs_nll + reward_nll + discount_nll + kl + info (+ action_mask_nll)
"""
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from buffer import EpisodeBatch
from communication import CommBlock
from core import (
    AbsorbingPosterior, CheckpointError, ConfigError, InvalidInputError, MambaConfig, ModelState,
    RngStream, bootstrap_latent, flatten_latent, read_blob, sample_categorical, write_blob,
)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def mlp(in_size: int, hidden: int, out_size: int, layers: int = 2) -> nn.Sequential:
    modules = []
    size = in_size
    for _ in range(layers - 1):
        modules += [nn.Linear(size, hidden), nn.ELU()]
        size = hidden
    modules.append(nn.Linear(size, out_size))
    return nn.Sequential(*modules)


# =============================================================================
# LOSS PRIMITIVES
# =============================================================================

def gaussian_nll(mean: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Elementwise unit-variance Gaussian negative log-likelihood"""
    return 0.5 * (target - mean) ** 2 + HALF_LOG_2PI


def kl_divergence(q_logits: torch.Tensor, p_logits: torch.Tensor) -> torch.Tensor:
    """KL(q || p) over [..., K, C] logits, summed over the K groups"""
    log_q = torch.log_softmax(q_logits, dim=-1)
    log_p = torch.log_softmax(p_logits, dim=-1)
    return (log_q.exp() * (log_q - log_p)).sum(dim=(-2, -1))


def kl_balanced(posterior_logits: torch.Tensor, prior_logits: torch.Tensor,
                w_ce: float = 0.8, w_ent: float = 0.2) -> torch.Tensor:
    """
    w_ce * KL(sg(q) || p) + w_ent * KL(q || sg(p)).

    Equal in value to KL(q || p); the first branch trains the prior, the
    second regularizes the posterior.
    """
    if abs(w_ce + w_ent - 1.0) > 1e-9:
        raise ConfigError(f"KL balance weights must sum to 1, got {w_ce} + {w_ent}")
    train_prior = kl_divergence(posterior_logits.detach(), prior_logits)
    train_posterior = kl_divergence(posterior_logits, prior_logits.detach())
    return w_ce * train_prior + w_ent * train_posterior


def info_loss(prev_action_logits: torch.Tensor, a_prev: torch.Tensor,
              weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Cross-entropy of predicting a_{t-1} from (h_t, z_t); mean over weighted entries"""
    ce = F.cross_entropy(prev_action_logits.reshape(-1, prev_action_logits.shape[-1]),
                         a_prev.reshape(-1).long(), reduction="none")
    if weights is None:
        return ce.mean()
    return (ce * weights.reshape(-1).to(ce.dtype)).sum() / max(weights.numel(), 1)


# =============================================================================
# OUTPUT TYPES
# =============================================================================

@dataclass
class HeadOutputs:
    obs_mean: torch.Tensor
    reward_mean: torch.Tensor
    discount_logit: torch.Tensor
    mask_logits: torch.Tensor
    prev_action_logits: torch.Tensor

    @property
    def discount_prob(self) -> torch.Tensor:
        return torch.sigmoid(self.discount_logit)

    @property
    def mask_prob(self) -> torch.Tensor:
        return torch.sigmoid(self.mask_logits)


@dataclass
class WorldModelOutputs:
    """Posterior unroll over a batch of sequences, [B, L, n, ...]"""

    h: torch.Tensor
    z: torch.Tensor
    posterior_logits: torch.Tensor
    prior_logits: torch.Tensor
    heads: HeadOutputs

    @property
    def states(self) -> ModelState:
        return ModelState(self.h, self.z)

    @property
    def obs_mean(self) -> torch.Tensor:
        return self.heads.obs_mean

    @property
    def reward_mean(self) -> torch.Tensor:
        return self.heads.reward_mean

    @property
    def discount_prob(self) -> torch.Tensor:
        return self.heads.discount_prob

    @property
    def mask_prob(self) -> torch.Tensor:
        return self.heads.mask_prob

    @property
    def prev_action_logits(self) -> torch.Tensor:
        return self.heads.prev_action_logits


@dataclass
class LossBreakdown:
    obs_nll: torch.Tensor
    reward_nll: torch.Tensor
    discount_nll: torch.Tensor
    kl: torch.Tensor
    info: torch.Tensor
    action_mask_nll: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in self.__dataclass_fields__}


# =============================================================================
# WORLD MODEL
# =============================================================================

class WorldModel(nn.Module):
    def __init__(self, config: MambaConfig, obs_size: int, n_actions: int):
        super().__init__()
        self.config = config
        self.obs_size = obs_size
        self.n_actions = n_actions
        self.n_groups = config.n_categoricals
        self.n_classes = config.n_classes
        hidden = config.hidden_size
        latent = config.latent_size
        feature = hidden + latent

        self.obs_encoder = mlp(obs_size, hidden, hidden)
        self.comm = CommBlock.from_config(config, n_actions)
        self.gru = nn.GRUCell(hidden, hidden)
        self.posterior_net = mlp(hidden + hidden, hidden, latent)
        self.prior_net = mlp(hidden, hidden, latent)
        self.obs_head = mlp(feature, hidden, obs_size)
        self.reward_head = mlp(feature, hidden, 1)
        self.discount_head = mlp(feature, hidden, 1)
        self.mask_head = mlp(feature, hidden, n_actions)
        self.prev_action_head = mlp(feature, hidden, n_actions)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def initial_state(self, batch_shape=()) -> ModelState:
        h = torch.zeros(*batch_shape, self.config.hidden_size, dtype=self.dtype)
        z = bootstrap_latent(self.n_groups, self.n_classes, batch_shape, self.dtype)
        return ModelState(h, z)

    def _clamp(self, logits: torch.Tensor) -> torch.Tensor:
        bound = self.config.logit_clamp
        logits = logits.reshape(*logits.shape[:-1], self.n_groups, self.n_classes)
        return torch.clamp(logits, -bound, bound)

    # ------------------------------------------------------------ components

    def communicate(self, z_prev: torch.Tensor, a_prev: torch.Tensor, alive: Optional[torch.Tensor] = None,
                    mask: Optional[torch.Tensor] = None, train_mode: bool = False) -> torch.Tensor:
        return self.comm(z_prev, a_prev, alive, mask, train_mode)

    def recurrent_update(self, h_prev: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        """Shared single-layer GRU update for every agent row"""
        lead = h_prev.shape[:-1]
        h = self.gru(e.reshape(-1, e.shape[-1]), h_prev.reshape(-1, h_prev.shape[-1]))
        return h.reshape(*lead, h.shape[-1])

    def represent(self, h: torch.Tensor, obs: torch.Tensor) -> torch.Tensor:
        """Posterior logits [..., K, C] from the agent's own observation"""
        return self._clamp(self.posterior_net(torch.cat([h, self.obs_encoder(obs)], dim=-1)))

    def transition_prior(self, h: torch.Tensor) -> torch.Tensor:
        """Prior logits [..., K, C]; observation-free"""
        return self._clamp(self.prior_net(h))

    def decode_heads(self, h: torch.Tensor, z: torch.Tensor) -> HeadOutputs:
        """Per-agent predictors on (h_i, z_i) only"""
        feature = torch.cat([z, h], dim=-1)
        return HeadOutputs(
            obs_mean=self.obs_head(feature),
            reward_mean=self.reward_head(feature).squeeze(-1),
            discount_logit=self.discount_head(feature).squeeze(-1),
            mask_logits=self.mask_head(feature),
            prev_action_logits=self.prev_action_head(feature),
        )

    def posterior_logits_for(self, h: torch.Tensor, obs: torch.Tensor, alive: torch.Tensor) -> torch.Tensor:
        """Posterior with the absorbing-state rule applied where alive is False"""
        alive = alive.bool()
        if self.config.absorbing_posterior == AbsorbingPosterior.ZERO_OBS:
            return self.represent(h, obs * alive.unsqueeze(-1).to(obs.dtype))
        logits = self.represent(h, obs)
        return torch.where(alive[..., None, None], logits, self.transition_prior(h))

    # ---------------------------------------------------------------- unroll

    def observe(self, batch: EpisodeBatch, train_mode: bool = False, latent_mode: str = "sample",
                rng: Optional[RngStream] = None) -> WorldModelOutputs:
        """Posterior unroll from h=0 and the bootstrap (z, a) at the first row"""
        B, L, n = batch.actions.shape
        dtype = self.dtype
        obs = batch.obs.to(dtype)
        state = self.initial_state((B, n))
        a_prev = torch.zeros(B, n, dtype=torch.long)
        sender_alive = torch.ones(B, n, dtype=torch.bool)
        hs, zs, posts, priors = [], [], [], []
        for t in range(L):
            e = self.communicate(state.z, a_prev, sender_alive, batch.neighbors[:, t], train_mode)
            h = self.recurrent_update(state.h, e)
            post = self.posterior_logits_for(h, obs[:, t], batch.alive[:, t])
            prior = self.transition_prior(h)
            z = flatten_latent(sample_categorical(post, rng, latent_mode))
            hs.append(h)
            zs.append(z)
            posts.append(post)
            priors.append(prior)
            state = ModelState(h, z)
            a_prev = batch.actions[:, t]
            sender_alive = batch.alive[:, t]
        h_all = torch.stack(hs, dim=1)
        z_all = torch.stack(zs, dim=1)
        return WorldModelOutputs(
            h=h_all,
            z=z_all,
            posterior_logits=torch.stack(posts, dim=1),
            prior_logits=torch.stack(priors, dim=1),
            heads=self.decode_heads(h_all, z_all),
        )

    def compute_loss(self, batch: EpisodeBatch, train_mode: bool = True, latent_mode: str = "sample",
                     rng: Optional[RngStream] = None) -> Tuple[LossBreakdown, WorldModelOutputs]:
        B, L, n = batch.actions.shape
        if L < 2:
            raise InvalidInputError(f"world model sequences need at least 2 steps, got {L}")
        out = self.observe(batch, train_mode, latent_mode, rng)
        dtype = self.dtype
        heads = out.heads
        alive = batch.alive.to(dtype)
        count = float(B * L * n)
        count_next = float(B * (L - 1) * n)

        obs_nll = (gaussian_nll(heads.obs_mean, batch.obs.to(dtype)).sum(-1) * alive).sum() / count

        # The state after step t predicts reward_t and discount_t
        reward_target = batch.rewards[:, :-1].to(dtype) * alive[:, :-1]
        reward_nll = gaussian_nll(heads.reward_mean[:, 1:], reward_target).sum() / count_next
        discount_target = ((batch.discounts[:, :-1] > 0) & batch.alive[:, :-1]).to(dtype)
        discount_nll = F.binary_cross_entropy_with_logits(
            heads.discount_logit[:, 1:], discount_target, reduction="sum") / count_next

        if self.config.use_kl_balancing:
            kl_terms = kl_balanced(out.posterior_logits, out.prior_logits,
                                   self.config.kl_balance_ce, self.config.kl_balance_entropy)
        else:
            kl_terms = kl_divergence(out.posterior_logits, out.prior_logits)
        kl = kl_terms.sum() / count

        zero = torch.zeros((), dtype=dtype)
        if self.config.use_info_loss:
            info = self.config.info_loss_weight * info_loss(
                heads.prev_action_logits[:, 1:], batch.actions[:, :-1], batch.alive[:, :-1])
        else:
            info = zero
        if self.config.predict_action_mask:
            action_mask_nll = F.binary_cross_entropy_with_logits(
                heads.mask_logits, batch.action_masks.to(dtype), reduction="sum") / count
        else:
            action_mask_nll = zero

        total = obs_nll + reward_nll + discount_nll + kl + info + action_mask_nll
        return LossBreakdown(obs_nll, reward_nll, discount_nll, kl, info, action_mask_nll, total), out


def world_model_loss(model: WorldModel, batch: EpisodeBatch, train_mode: bool = True,
                     rng: Optional[RngStream] = None) -> LossBreakdown:
    return model.compute_loss(batch, train_mode=train_mode, rng=rng)[0]


class WorldModelTrainer:
    """Single-writer Adam updates with global gradient-norm clipping"""

    def __init__(self, model: WorldModel, config: MambaConfig):
        self.model = model
        self.config = config
        self.optimizer = torch.optim.Adam(model.parameters(), lr=config.model_lr)
        self.updates = 0

    def train_step(self, batch: EpisodeBatch, rng: Optional[RngStream] = None) -> Dict[str, float]:
        loss, _ = self.model.compute_loss(batch, train_mode=True, rng=rng)
        self.optimizer.zero_grad()
        loss.total.backward()
        grad_norm = nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.updates += 1
        metrics = loss.as_floats()
        metrics["grad_norm"] = float(grad_norm)
        return metrics

    def state_dict(self) -> Dict[str, Any]:
        return {"optimizer": self.optimizer.state_dict(), "updates": self.updates}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.optimizer.load_state_dict(state["optimizer"])
        self.updates = state["updates"]


# =============================================================================
# CHECKPOINTS
# =============================================================================

def save_checkpoint(path: str, config: MambaConfig, state: Dict[str, Any]) -> None:
    """Parameters, optimizer states and counters, tagged with the config hash"""
    payload = {
        "config": config.model_dump(mode="json"),
        "config_hash": config.config_hash(),
        "state": state,
    }
    write_blob(path, "checkpoint", payload)


def load_checkpoint(path: str) -> Tuple[MambaConfig, Dict[str, Any]]:
    payload = read_blob(path, "checkpoint")
    try:
        config = MambaConfig.build(**payload["config"])
    except (ConfigError, KeyError) as e:
        raise CheckpointError(f"{path}: stored config is invalid: {e}") from e
    if config.config_hash() != payload.get("config_hash"):
        raise CheckpointError(f"{path}: config hash mismatch")
    return config, payload["state"]
