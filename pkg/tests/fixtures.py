"""
Test fixtures for the MAMBA toolkit.
Tiny configurations, a deterministic idle environment, hand-built episodes
and filled replay buffers shared by the unit, property and integration tests.
"""
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Set

import numpy as np
import pytest

sys.path.insert(0, '.')
from buffer import Episode, EpisodeBatch, EpisodeBuilder, ReplayBuffer
from core import EnvName, MambaConfig, RngStream, load_config
from envs import EnvStep, MiniRail, MultiAgentEnv, SkirmishToy
from exec_runtime import AgentBundle, CentralizedController, build_bundle


REPO_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
SMOKE_CONFIG = os.path.join(REPO_ROOT, "configs", "smoke.env")


# =============================================================================
# CONFIGURATIONS
# =============================================================================

def tiny_config(**overrides) -> MambaConfig:
    """Small dimensions that keep every forward pass in the millisecond range"""
    values: Dict[str, Any] = dict(
        env="minirail",
        n_agents=2,
        hidden_size=16,
        n_categoricals=4,
        n_classes=4,
        comm_layers=1,
        grid_size=5,
        max_episode_steps=20,
        locality_radius=None,
        seq_len=6,
        n_rollouts=3,
        horizon=4,
        model_epochs=1,
        ppo_updates=1,
        ppo_epochs=1,
        batch_size=32,
        buffer_size=10_000,
        eval_every=40,
        eval_episodes=1,
        mf_rollout_steps=40,
    )
    values.update(overrides)
    return load_config(**values)


def smoke_config(**overrides) -> MambaConfig:
    return load_config(SMOKE_CONFIG, **overrides)


# =============================================================================
# FREQUENCY CHECKS
# =============================================================================

def chi_square(counts: Sequence[float], probs: Sequence[float]) -> float:
    """Pearson statistic of observed counts against category probabilities"""
    counts = np.asarray(counts, dtype=np.float64)
    expected = counts.sum() * np.asarray(probs, dtype=np.float64)
    return float(((counts - expected) ** 2 / expected).sum())


def chi_square_critical(df: int, z: float = 3.09) -> float:
    """Upper critical value (p = 0.001 at the default z), Wilson-Hilferty approximation"""
    k = 2.0 / (9.0 * df)
    return float(df * (1.0 - k + z * np.sqrt(k)) ** 3)


# =============================================================================
# IDLE ENVIRONMENT
# =============================================================================

class IdleEnv(MultiAgentEnv):
    """
    Fully connected, reward-free environment with scheduled deaths.

    Every action is legal for a living agent; `deaths` maps an agent to the
    step after which it is done. Observations are seeded noise so that the
    posterior sees something different at every step.
    """

    name = EnvName.MINIRAIL

    def __init__(self, n_agents: int = 2, obs_size: int = 4, n_actions: int = 3, max_steps: int = 10,
                 deaths: Optional[Dict[int, int]] = None, radius_neighbors: Optional[List[Set[int]]] = None):
        self.n_agents = n_agents
        self.obs_size = obs_size
        self.n_actions = n_actions
        self.max_steps = max_steps
        self.deaths = deaths or {}
        self.radius_neighbors = radius_neighbors
        self.t = 0

    def reset(self, seed: int) -> EnvStep:
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self.dones = np.zeros(self.n_agents, dtype=bool)
        return self._emit()

    def step(self, actions: Sequence[int]) -> EnvStep:
        self._check_actions(actions)
        self.t += 1
        for agent, at in self.deaths.items():
            if self.t >= at:
                self.dones[agent] = True
        return self._emit()

    def _emit(self) -> EnvStep:
        obs = self.rng.normal(size=(self.n_agents, self.obs_size)).astype(np.float32)
        obs[self.dones] = 0.0
        finished = bool(self.dones.all())
        truncated = not finished and self.t >= self.max_steps
        return EnvStep(
            obs=obs,
            rewards=np.zeros(self.n_agents, dtype=np.float32),
            dones=self.dones.copy(),
            action_masks=self.action_masks(),
            neighbors=self.neighbors(),
            done=finished or truncated,
            info={"t": self.t},
            truncated=truncated,
        )

    def action_masks(self) -> np.ndarray:
        masks = np.ones((self.n_agents, self.n_actions), dtype=bool)
        masks[self.dones, 1:] = False
        return masks

    def legal_actions(self, agent: int) -> np.ndarray:
        return self.action_masks()[agent]

    def neighbors(self, radius: Optional[float] = None) -> List[Set[int]]:
        if self.radius_neighbors is not None:
            return [set(group) for group in self.radius_neighbors]
        return [set(range(self.n_agents)) for _ in range(self.n_agents)]

    def success(self) -> float:
        return 0.0

    def render(self) -> str:
        return f"t={self.t}"

    def spec_dict(self) -> Dict[str, Any]:
        return {"env.name": "idle", "env.n_agents": self.n_agents}


# =============================================================================
# EPISODES
# =============================================================================

def episode_with_death(n_agents: int = 2, obs_size: int = 5, n_actions: int = 3, length: int = 6,
                       death_step: int = 2, gamma: float = 0.99, seed: int = 0) -> Episode:
    """Agent 1 is done after step `death_step`; every other agent survives"""
    rng = np.random.default_rng(seed)
    builder = EpisodeBuilder(n_agents, obs_size, n_actions, gamma)
    alive = np.ones(n_agents, dtype=bool)
    for t in range(length):
        next_alive = alive.copy()
        if t == death_step:
            next_alive[1] = False
        masks = np.ones((n_agents, n_actions), dtype=bool)
        actions = rng.integers(0, n_actions, size=n_agents)
        rewards = rng.normal(size=n_agents).astype(np.float32)
        obs = rng.normal(size=(n_agents, obs_size)).astype(np.float32)
        builder.append(obs, actions, rewards, alive, next_alive, masks)
        alive = next_alive
    return builder.build()


def all_alive_episode(n_agents: int = 2, obs_size: int = 5, n_actions: int = 3, length: int = 4,
                      gamma: float = 0.99, seed: int = 0) -> Episode:
    return episode_with_death(n_agents, obs_size, n_actions, length, death_step=length + 1, gamma=gamma, seed=seed)


def roll_episode(bundle: AgentBundle, env: MultiAgentEnv, seed: int) -> Episode:
    """One stochastic episode through the centralized controller"""
    config = bundle.config
    controller = CentralizedController(bundle.model, bundle.actor, config, RngStream(seed, "fixture"))
    step = env.reset(seed)
    builder = EpisodeBuilder(env.n_agents, env.obs_size, env.n_actions, config.gamma)
    while not step.done:
        actions = controller.step(step)
        nxt = env.step(actions)
        builder.add_transition(step, actions, nxt)
        step = nxt
    return builder.build()


def filled_buffer(bundle: AgentBundle, env: MultiAgentEnv, episodes: int = 3) -> ReplayBuffer:
    buffer = ReplayBuffer(bundle.config.buffer_size, env.n_agents)
    for seed in range(episodes):
        buffer.add_episode(roll_episode(bundle, env, seed))
    return buffer


# =============================================================================
# PYTEST FIXTURES
# =============================================================================

@pytest.fixture
def config() -> MambaConfig:
    return tiny_config()


@pytest.fixture
def minirail() -> MiniRail:
    return MiniRail(n_agents=2, grid_size=5, max_steps=20, locality_radius=None)


@pytest.fixture
def skirmish() -> SkirmishToy:
    return SkirmishToy(n_agents=2, grid_size=5, max_steps=20)


@pytest.fixture
def bundle(config, minirail) -> AgentBundle:
    return build_bundle(config, minirail)


@pytest.fixture
def buffer(bundle, minirail) -> ReplayBuffer:
    return filled_buffer(bundle, minirail)


@pytest.fixture
def death_episode() -> Episode:
    return episode_with_death()


@pytest.fixture
def death_batch(death_episode) -> EpisodeBatch:
    return EpisodeBatch.from_episodes([death_episode])
