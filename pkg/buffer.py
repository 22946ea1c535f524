"""
Episodic replay buffer with joint (all-agent) storage.

Record t of an episode holds, for every agent:
    obs_t, action_t, reward received after action_t,
    discount_t = gamma * alive_{t+1}, action mask at t, alive_t, neighbors at t
Once an agent is done every later record is absorbing: zero observation,
action 0, reward 0, discount 0, mask {0}.
"""
import threading
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from core import AgentStep, InvalidInputError, NotReadyError, RngStream, read_blob, write_blob


def absorbing_mask(n_actions: int) -> np.ndarray:
    mask = np.zeros(n_actions, dtype=bool)
    mask[0] = True
    return mask


@dataclass
class Episode:
    obs: np.ndarray           # [T, n, d] float32
    actions: np.ndarray       # [T, n] int64
    rewards: np.ndarray       # [T, n] float32
    discounts: np.ndarray     # [T, n] float32
    action_masks: np.ndarray  # [T, n, A] bool
    alive: np.ndarray         # [T, n] bool
    neighbors: np.ndarray     # [T, n, n] bool

    def __len__(self) -> int:
        return self.obs.shape[0]

    @property
    def n_agents(self) -> int:
        return self.obs.shape[1]

    def validate(self) -> None:
        T, n = self.actions.shape[:2]
        for name in ("obs", "rewards", "discounts", "action_masks", "alive", "neighbors"):
            array = getattr(self, name)
            if array.shape[:2] != (T, n):
                raise InvalidInputError(f"episode field {name} has shape {array.shape}, expected ({T}, {n}, ...)")
        if T == 0:
            raise InvalidInputError("episode is empty")
        dead = ~self.alive
        if (self.rewards[dead] != 0).any() or (self.discounts[dead] != 0).any():
            raise InvalidInputError("absorbing records must carry reward 0 and discount 0")
        taken = np.take_along_axis(self.action_masks, self.actions[..., None], axis=-1)[..., 0]
        if not taken[self.alive].all():
            raise InvalidInputError("an alive agent took a masked action")
        died = np.logical_or.accumulate(~self.alive, axis=0)
        if (self.alive & died).any():
            raise InvalidInputError("an agent comes back to life after its absorbing step")

    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=0)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    @classmethod
    def from_agent_steps(cls, streams: Sequence[Sequence[AgentStep]]) -> "Episode":
        """Build from per-agent AgentStep streams aligned by timestep"""
        if not streams:
            raise InvalidInputError("no agent streams given")
        lengths = {len(s) for s in streams}
        if len(lengths) != 1:
            raise InvalidInputError(f"agent streams have misaligned lengths {sorted(lengths)}")
        n = len(streams)
        T = lengths.pop()
        if T == 0:
            raise InvalidInputError("episode is empty")
        for stream in streams:
            for step in stream:
                step.validate()
        neighbors = np.zeros((T, n, n), dtype=bool)
        for t in range(T):
            for i in range(n):
                neighbors[t, i, i] = True
                for j in streams[i][t].neighbors:
                    neighbors[t, i, j] = True
        episode = cls(
            obs=np.array([[s[t].obs for s in streams] for t in range(T)], dtype=np.float32),
            actions=np.array([[s[t].action for s in streams] for t in range(T)], dtype=np.int64),
            rewards=np.array([[s[t].reward for s in streams] for t in range(T)], dtype=np.float32),
            discounts=np.array([[s[t].discount for s in streams] for t in range(T)], dtype=np.float32),
            action_masks=np.array([[s[t].action_mask for s in streams] for t in range(T)], dtype=bool),
            alive=np.array([[s[t].alive for s in streams] for t in range(T)], dtype=bool),
            neighbors=neighbors,
        )
        episode.validate()
        return episode


class EpisodeBuilder:
    """Accumulates environment steps and applies the absorbing padding rule"""

    def __init__(self, n_agents: int, obs_size: int, n_actions: int, gamma: float):
        self.n_agents = n_agents
        self.obs_size = obs_size
        self.n_actions = n_actions
        self.gamma = gamma
        self._rows: List[Dict[str, np.ndarray]] = []
        self._alive = np.ones(n_agents, dtype=bool)

    def __len__(self) -> int:
        return len(self._rows)

    def append(self, obs: np.ndarray, actions: Sequence[int], rewards: Sequence[float], alive: Sequence[bool],
               next_alive: Sequence[bool], action_masks: np.ndarray, neighbor_mask: Optional[np.ndarray] = None) -> None:
        alive = np.asarray(alive, dtype=bool) & self._alive
        next_alive = np.asarray(next_alive, dtype=bool) & alive
        obs = np.asarray(obs, dtype=np.float32)
        if obs.shape != (self.n_agents, self.obs_size):
            raise InvalidInputError(f"observation block {obs.shape} != ({self.n_agents}, {self.obs_size})")
        masks = np.where(alive[:, None], np.asarray(action_masks, dtype=bool), absorbing_mask(self.n_actions))
        if neighbor_mask is None:
            neighbor_mask = np.ones((self.n_agents, self.n_agents), dtype=bool)
        self._rows.append({
            "obs": np.where(alive[:, None], obs, 0.0).astype(np.float32),
            "actions": np.where(alive, np.asarray(actions, dtype=np.int64), 0),
            "rewards": np.where(alive, np.asarray(rewards, dtype=np.float32), 0.0).astype(np.float32),
            "discounts": (self.gamma * next_alive).astype(np.float32),
            "action_masks": masks,
            "alive": alive.copy(),
            "neighbors": np.asarray(neighbor_mask, dtype=bool) | np.eye(self.n_agents, dtype=bool),
        })
        self._alive = next_alive.copy()

    def add_transition(self, before, actions: Sequence[int], after) -> None:
        """Record the EnvStep `before`, the actions taken, and the outcome `after`"""
        self.append(before.obs, actions, after.rewards, before.alive, after.alive,
                    before.action_masks, before.neighbor_mask)

    def build(self) -> Episode:
        if not self._rows:
            raise InvalidInputError("no steps recorded")
        episode = Episode(**{key: np.stack([row[key] for row in self._rows]) for key in self._rows[0]})
        episode.validate()
        return episode


@dataclass
class EpisodeBatch:
    """Sampled sequences, tensors shaped [B, L, n, ...]"""

    obs: torch.Tensor
    actions: torch.Tensor
    rewards: torch.Tensor
    discounts: torch.Tensor
    action_masks: torch.Tensor
    alive: torch.Tensor
    neighbors: torch.Tensor
    valid: torch.Tensor              # [B, L] real (not padded) steps
    episode_ids: np.ndarray          # [B]
    timesteps: np.ndarray            # [B, L] episode time index of each row

    @property
    def batch_size(self) -> int:
        return self.obs.shape[0]

    @property
    def length(self) -> int:
        return self.obs.shape[1]

    @property
    def obs_loss_mask(self) -> torch.Tensor:
        return self.alive.float()

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode], length: Optional[int] = None,
                      offsets: Optional[Sequence[int]] = None, episode_ids: Optional[Sequence[int]] = None) -> "EpisodeBatch":
        length = length or max(len(e) for e in episodes)
        offsets = offsets if offsets is not None else [0] * len(episodes)
        rows = [_slice_padded(e, o, length) for e, o in zip(episodes, offsets)]
        stacked = {key: np.stack([r[key] for r in rows]) for key in rows[0]}
        return cls(
            obs=torch.from_numpy(stacked["obs"]),
            actions=torch.from_numpy(stacked["actions"]),
            rewards=torch.from_numpy(stacked["rewards"]),
            discounts=torch.from_numpy(stacked["discounts"]),
            action_masks=torch.from_numpy(stacked["action_masks"]),
            alive=torch.from_numpy(stacked["alive"]),
            neighbors=torch.from_numpy(stacked["neighbors"]),
            valid=torch.from_numpy(stacked["valid"]),
            episode_ids=np.asarray(episode_ids if episode_ids is not None else range(len(episodes))),
            timesteps=stacked["timesteps"],
        )


def _slice_padded(episode: Episode, offset: int, length: int) -> Dict[str, np.ndarray]:
    T, n = len(episode), episode.n_agents
    end = min(offset + length, T)
    real = end - offset
    pad = length - real
    out = {name: getattr(episode, name)[offset:end] for name in episode.__dataclass_fields__}
    if pad > 0:
        n_actions = episode.action_masks.shape[-1]
        fill = {
            "obs": np.zeros((pad, n, episode.obs.shape[-1]), dtype=np.float32),
            "actions": np.zeros((pad, n), dtype=np.int64),
            "rewards": np.zeros((pad, n), dtype=np.float32),
            "discounts": np.zeros((pad, n), dtype=np.float32),
            "action_masks": np.broadcast_to(absorbing_mask(n_actions), (pad, n, n_actions)).copy(),
            "alive": np.zeros((pad, n), dtype=bool),
            "neighbors": np.broadcast_to(episode.neighbors[T - 1], (pad, n, n)).copy(),
        }
        out = {name: np.concatenate([out[name], fill[name]]) for name in out}
    out["valid"] = np.arange(length) < real
    out["timesteps"] = offset + np.arange(length)
    return out


class ReplayBuffer:
    """
    FIFO episode store; capacity counts environment transitions.

    One writer and many readers: add_episode and sample_sequences both take
    the lock, so a sample always sees a consistent set of episodes.
    """

    def __init__(self, capacity: int, n_agents: int):
        if capacity < 1:
            raise InvalidInputError("buffer capacity must be positive")
        self.capacity = capacity
        self.n_agents = n_agents
        self.episodes: deque = deque()
        self._transitions = 0
        self._next_id = 0
        self._ids: deque = deque()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def num_episodes(self) -> int:
        return len(self.episodes)

    @property
    def num_transitions(self) -> int:
        return self._transitions

    @property
    def num_agent_transitions(self) -> int:
        return self._transitions * self.n_agents

    def add_episode(self, trajectory: Union[Episode, Sequence[Sequence[AgentStep]]]) -> None:
        episode = trajectory if isinstance(trajectory, Episode) else Episode.from_agent_steps(trajectory)
        episode.validate()
        if episode.n_agents != self.n_agents:
            raise InvalidInputError(f"episode has {episode.n_agents} agents, buffer expects {self.n_agents}")
        with self._lock:
            self.episodes.append(episode)
            self._ids.append(self._next_id)
            self._next_id += 1
            self._transitions += len(episode)
            while self._transitions > self.capacity and len(self.episodes) > 1:
                evicted = self.episodes.popleft()
                self._ids.popleft()
                self._transitions -= len(evicted)

    def sample_sequences(self, count: int, length: int, rng: RngStream) -> EpisodeBatch:
        """Uniform over (episode, offset) pairs; short tails padded with absorbing steps"""
        with self._lock:
            episodes = list(self.episodes)
            ids = list(self._ids)
        if not episodes:
            raise NotReadyError("replay buffer is empty")
        if count < 1 or length < 1:
            raise InvalidInputError("count and length must be positive")
        starts = np.array([max(len(e) - length, 0) + 1 for e in episodes], dtype=np.int64)
        flat = rng.numpy.integers(0, starts.sum(), size=count)
        bounds = np.cumsum(starts)
        which = np.searchsorted(bounds, flat, side="right")
        offsets = flat - np.concatenate([[0], bounds[:-1]])[which]
        return EpisodeBatch.from_episodes(
            [episodes[k] for k in which], length, [int(o) for o in offsets], [ids[k] for k in which]
        )

    def dump(self, path: str) -> None:
        with self._lock:
            payload = {
                "capacity": self.capacity,
                "n_agents": self.n_agents,
                "next_id": self._next_id,
                "ids": list(self._ids),
                "episodes": [e.to_arrays() for e in self.episodes],
            }
        write_blob(path, "buffer", payload)

    @classmethod
    def restore(cls, path: str) -> "ReplayBuffer":
        payload = read_blob(path, "buffer")
        buffer = cls(payload["capacity"], payload["n_agents"])
        for arrays in payload["episodes"]:
            buffer.add_episode(Episode(**arrays))
        buffer._ids = deque(payload["ids"])
        buffer._next_id = payload["next_id"]
        return buffer
