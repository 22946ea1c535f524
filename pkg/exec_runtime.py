"""
Decentralized execution.

Every AgentRuntime owns a private copy of the world model and actor and
learns about its peers only through decoded frames delivered by the
MessageBus. CentralizedController runs the same per-agent computation on
one shared model; equivalence_harness checks the two agree.
"""
import copy
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel

from communication import MessageCodec, SummaryFrame, frame_sender
from core import (
    Algo, CodecError, ConfigError, DivergenceError, MambaConfig, ProtocolError, RngStream,
    bootstrap_latent, flatten_latent, latent_indices, one_hot_latent, sample_categorical,
)
from envs import EnvStep, MultiAgentEnv, make_env
from policy import Actor, Critic, masked_logits
from world_model import WorldModel, load_checkpoint

FaultHook = Callable[[int, int, int, bytes], bytes]


# =============================================================================
# BUNDLES
# =============================================================================

@dataclass
class AgentBundle:
    """Everything a checkpoint restores: config plus networks"""

    config: MambaConfig
    actor: Actor
    critic: Critic
    model: Optional[WorldModel]
    obs_size: int
    n_actions: int


def build_bundle(config: MambaConfig, env: Optional[MultiAgentEnv] = None) -> AgentBundle:
    """Freshly initialized networks, seeded from the model-init substream"""
    env = env or make_env(config)
    torch.manual_seed(RngStream(config.seed, "model-init").randint(2**31))
    hidden = config.hidden_size
    if config.algo == Algo.MAMBA:
        model = WorldModel(config, env.obs_size, env.n_actions)
        actor = Actor(config.latent_size + hidden, env.n_actions, hidden)
        critic_in = config.latent_size + (hidden if config.critic_uses_hidden else 0)
    else:
        model = None
        actor = Actor(env.obs_size, env.n_actions, hidden)
        critic_in = env.obs_size
    critic = Critic(critic_in, hidden, config.critic_layers)
    return AgentBundle(config, actor, critic, model, env.obs_size, env.n_actions)


def load_bundle(path: str) -> Tuple[AgentBundle, Dict]:
    config, state = load_checkpoint(path)
    bundle = build_bundle(config)
    bundle.actor.load_state_dict(state["actor"])
    bundle.critic.load_state_dict(state["critic"])
    if bundle.model is not None:
        bundle.model.load_state_dict(state["model"])
    return bundle, state


# =============================================================================
# PER-AGENT INFERENCE
# =============================================================================

@dataclass
class AgentDecision:
    action: int
    logits: torch.Tensor
    h: torch.Tensor
    z: torch.Tensor


def finish_agent_step(model: WorldModel, actor: Actor, h_prev: torch.Tensor, e: torch.Tensor, obs: np.ndarray,
                      alive: bool, action_mask: np.ndarray, rng: RngStream, greedy: bool) -> AgentDecision:
    """GRU update, posterior sample and action for one agent row"""
    h = model.recurrent_update(h_prev.unsqueeze(0), e.unsqueeze(0))[0]
    obs_t = torch.as_tensor(np.asarray(obs), dtype=h.dtype)
    logits_z = model.posterior_logits_for(h, obs_t, torch.tensor(bool(alive)))
    z = flatten_latent(sample_categorical(logits_z, rng))
    features = torch.cat([z, h], dim=-1)
    if alive:
        out = actor.act(features, torch.as_tensor(np.asarray(action_mask), dtype=torch.bool), rng, greedy)
        return AgentDecision(int(out.action), out.logits, h, z)
    absorbing = torch.zeros(model.n_actions, dtype=torch.bool)
    absorbing[0] = True
    return AgentDecision(0, masked_logits(actor(features), absorbing), h, z)


def agent_step(model: WorldModel, actor: Actor, agent_id: int, h_prev: torch.Tensor, z_rows: torch.Tensor,
               a_rows: torch.Tensor, heard: torch.Tensor, obs: np.ndarray, alive: bool, action_mask: np.ndarray,
               rng: RngStream, greedy: bool = False) -> AgentDecision:
    e = model.comm.encode_agent(z_rows, a_rows, heard, agent_id)
    return finish_agent_step(model, actor, h_prev, e, obs, alive, action_mask, rng, greedy)


# =============================================================================
# BUS
# =============================================================================

@dataclass
class BandwidthLedger:
    """
    Per-episode traffic.

    Payload bits count one message per running agent-step in both exchange
    modes. Under linear exchange no message frames travel: the payload bits
    are the frame equivalent, frames and framed_bytes stay 0, and the real
    traffic is summary_bytes.
    """

    payload_bits_per_frame: int
    frame_bytes: int
    alive_payload_bits: int = 0
    total_payload_bits: int = 0
    framed_bytes: int = 0
    summary_bytes: int = 0
    frames: int = 0
    per_agent_bits: Dict[int, int] = field(default_factory=dict)

    def record_frame(self, sender: int, alive: bool, framed: bool = True) -> None:
        if framed:
            self.frames += 1
            self.framed_bytes += self.frame_bytes
        self.total_payload_bits += self.payload_bits_per_frame
        if alive:
            self.alive_payload_bits += self.payload_bits_per_frame
            self.per_agent_bits[sender] = self.per_agent_bits.get(sender, 0) + self.payload_bits_per_frame

    def record_summary(self, size: int) -> None:
        self.summary_bytes += size


class MessageBus:
    """
    In-process frame exchange.

    Frames published during step t-1 are delivered for step t, restricted
    by the locality mask and sorted by sender id regardless of arrival order.
    """

    def __init__(self, n_agents: int, codec: MessageCodec, log_path: Optional[str] = None,
                 fault: Optional[FaultHook] = None):
        self.n_agents = n_agents
        self.codec = codec
        self.fault = fault
        self.ledger = BandwidthLedger(codec.payload_bits, codec.frame_size)
        self._pending: List[Tuple[int, bytes]] = []
        self._summaries: List[Tuple[int, bytes]] = []
        self._log = None
        if log_path:
            os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
            self._log = open(log_path, "wb")

    def publish(self, frame: bytes, account: bool = True) -> None:
        if len(frame) != self.codec.frame_size:
            raise CodecError(f"frame is {len(frame)} bytes, expected {self.codec.frame_size}")
        sender = frame_sender(frame)
        if any(s == sender for s, _ in self._pending):
            raise ProtocolError(f"agent {sender} published twice in one step")
        self._pending.append((sender, frame))
        if account:
            self.ledger.record_frame(sender, bool(frame[-1]))
        if self._log is not None:
            self._log.write(frame)

    def publish_summary(self, frame: bytes) -> None:
        self._summaries.append((frame_sender(frame), frame))
        self.ledger.record_summary(len(frame))

    def _route(self, pending: List[Tuple[int, bytes]], mask: np.ndarray, step: int,
               apply_fault: bool) -> Dict[int, List[bytes]]:
        inbox: Dict[int, List[bytes]] = {i: [] for i in range(self.n_agents)}
        for sender, frame in sorted(pending, key=lambda item: item[0]):
            for recipient in range(self.n_agents):
                if mask[recipient, sender] or recipient == sender:
                    out = frame
                    if apply_fault and self.fault is not None:
                        out = self.fault(step, sender, recipient, frame)
                    inbox[recipient].append(out)
        return inbox

    def deliver(self, mask: np.ndarray, step: int) -> Dict[int, List[bytes]]:
        pending, self._pending = self._pending, []
        return self._route(pending, mask, step, True)

    def deliver_summaries(self, mask: np.ndarray, step: int) -> Dict[int, List[bytes]]:
        pending, self._summaries = self._summaries, []
        return self._route(pending, mask, step, False)

    def close(self) -> None:
        if self._log is not None:
            self._log.close()
            self._log = None


def read_bus_log(path: str, codec: MessageCodec) -> List:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) % codec.frame_size:
        raise CodecError(f"{path}: {len(data)} bytes is not a whole number of {codec.frame_size}-byte frames")
    return [codec.decode(data[k:k + codec.frame_size]) for k in range(0, len(data), codec.frame_size)]


def flip_bit_fault(step: int, recipient: int, bit: int, sender: Optional[int] = None) -> FaultHook:
    """Fault hook flipping one latent-payload bit of frames delivered to `recipient` at `step`"""
    def hook(at_step: int, from_agent: int, to_agent: int, frame: bytes) -> bytes:
        if at_step != step or to_agent != recipient or (sender is not None and from_agent != sender):
            return frame
        data = bytearray(frame)
        data[6 + bit // 8] ^= 0x80 >> (bit % 8)
        return bytes(data)
    return hook


# =============================================================================
# RUNTIMES
# =============================================================================

class AgentRuntime:
    """One agent's replica; cross-agent input arrives only as frames"""

    def __init__(self, agent_id: int, model: WorldModel, actor: Actor, config: MambaConfig, rng: RngStream,
                 greedy: bool = False):
        self.agent_id = agent_id
        self.n_agents = config.n_agents
        self._config = config
        self._model = copy.deepcopy(model).eval()
        self._actor = copy.deepcopy(actor).eval()
        self._rng = rng
        self._greedy = greedy
        self.codec = MessageCodec.from_config(config)
        self.last_logits: Optional[torch.Tensor] = None
        self.reset()

    def reset(self) -> None:
        state = self._model.initial_state()
        self._h = state.h
        self._z = state.z
        self._a = 0
        self._t = 0
        self._x: Optional[torch.Tensor] = None
        self._heard: Optional[List[int]] = None

    def bootstrap_frame(self) -> bytes:
        zeros = [0] * self._config.n_categoricals
        return self.codec.encode(self.agent_id, 0, zeros, 0, True)

    def _emit(self, decision: AgentDecision, alive: bool) -> Tuple[int, bytes]:
        self._h, self._z, self._a = decision.h, decision.z, decision.action
        self.last_logits = decision.logits
        self._t += 1
        indices = latent_indices(decision.z.reshape(self._config.n_categoricals, self._config.n_classes))
        return decision.action, self.codec.encode(self.agent_id, self._t, indices, decision.action, alive)

    @torch.no_grad()
    def runtime_step(self, obs: np.ndarray, action_mask: np.ndarray, inbox: Sequence[bytes],
                     alive: bool = True) -> Tuple[int, bytes]:
        messages = [self.codec.decode(frame) for frame in inbox]
        senders = [m.agent_id for m in messages]
        if self.agent_id not in senders:
            raise ProtocolError(f"agent {self.agent_id} did not receive its own step-{self._t} message")
        if len(set(senders)) != len(senders):
            raise ProtocolError(f"agent {self.agent_id} received duplicate messages")
        dtype = self._model.dtype
        z_rows = bootstrap_latent(self._config.n_categoricals, self._config.n_classes, (self.n_agents,), dtype)
        a_rows = torch.zeros(self.n_agents, dtype=torch.long)
        heard = torch.zeros(self.n_agents, dtype=torch.bool)
        for message in messages:
            if message.step != self._t:
                raise ProtocolError(f"agent {self.agent_id} at step {self._t} received a step-{message.step} message")
            if message.agent_id >= self.n_agents:
                raise ProtocolError(f"message from unknown agent {message.agent_id}")
            index = torch.tensor(message.z_indices)
            z_rows[message.agent_id] = flatten_latent(one_hot_latent(index, self._config.n_classes, dtype))
            a_rows[message.agent_id] = message.action
            heard[message.agent_id] = True
        decision = agent_step(self._model, self._actor, self.agent_id, self._h, z_rows, a_rows, heard,
                              obs, alive, action_mask, self._rng, self._greedy)
        return self._emit(decision, alive)

    # Linear exchange: one summary round per attention layer

    @torch.no_grad()
    def begin_linear_step(self) -> None:
        self._x = self._model.comm.input_row(self._z, torch.tensor(self._a), self.agent_id)
        self._heard = None

    @torch.no_grad()
    def summary(self, layer: int) -> bytes:
        key, value = self._model.comm.layers[layer].summarize(self._x)
        frame = SummaryFrame(self.agent_id, self._t, layer, key.numpy(), value.numpy())
        return frame.encode()

    @torch.no_grad()
    def absorb_summaries(self, layer: int, frames: Sequence[bytes]) -> None:
        summaries = [SummaryFrame.decode(f) for f in frames]
        keys, values = {}, {}
        for s in summaries:
            if s.layer != layer or s.step != self._t:
                raise ProtocolError(f"agent {self.agent_id} got a summary for layer {s.layer} step {s.step}")
            keys[s.agent_id], values[s.agent_id] = s.tensors()
        if self.agent_id not in keys:
            raise ProtocolError(f"agent {self.agent_id} did not receive its own layer-{layer} summary")
        if self._heard is None:
            self._heard = sorted(keys)
        self._x = self._model.comm.layers[layer].forward_row(self._x, keys, values, expected=self._heard)

    @torch.no_grad()
    def finish_linear_step(self, obs: np.ndarray, action_mask: np.ndarray, alive: bool = True) -> int:
        decision = finish_agent_step(self._model, self._actor, self._h, self._x, obs, alive, action_mask,
                                     self._rng, self._greedy)
        self._h, self._z, self._a = decision.h, decision.z, decision.action
        self.last_logits = decision.logits
        self._t += 1
        return decision.action


class CentralizedController:
    """All agents on one model, reproducing each runtime's inputs exactly"""

    def __init__(self, model: WorldModel, actor: Actor, config: MambaConfig, rng: RngStream, greedy: bool = False):
        self.model = model
        self.actor = actor
        self.config = config
        self.greedy = greedy
        self.n_agents = config.n_agents
        self.rngs = [rng.substream(f"agent-{i}") for i in range(self.n_agents)]
        self.last_logits: List[Optional[torch.Tensor]] = [None] * self.n_agents
        self.reset()

    def reset(self) -> None:
        state = self.model.initial_state((self.n_agents,))
        self.h, self.z = state.h, state.z
        self.a = torch.zeros(self.n_agents, dtype=torch.long)
        self.sending = torch.ones(self.n_agents, dtype=torch.bool)

    @torch.no_grad()
    def step(self, env_step: EnvStep) -> np.ndarray:
        n = self.n_agents
        neighbors = torch.from_numpy(env_step.neighbor_mask)
        alive = env_step.alive
        bootstrap = bootstrap_latent(self.config.n_categoricals, self.config.n_classes, (n,), self.model.dtype)
        shared_e = None
        if self.config.use_linear_comm:
            mask = (neighbors & self.sending.unsqueeze(0)) | torch.eye(n, dtype=torch.bool)
            shared_e = self.model.comm(self.z, self.a, None, mask, False)
        actions = np.zeros(n, dtype=np.int64)
        new_h, new_z = self.h.clone(), self.z.clone()
        ran = torch.zeros(n, dtype=torch.bool)
        for i in range(n):
            if not alive[i] and not self.config.broadcast_dead:
                self.last_logits[i] = None
                continue
            if shared_e is not None:
                e = shared_e[i]
            else:
                heard = neighbors[i] & self.sending
                heard[i] = True
                z_rows = torch.where(heard.unsqueeze(-1), self.z, bootstrap)
                a_rows = torch.where(heard, self.a, torch.zeros_like(self.a))
                e = self.model.comm.encode_agent(z_rows, a_rows, heard, i)
            decision = finish_agent_step(self.model, self.actor, self.h[i], e, env_step.obs[i], bool(alive[i]),
                                         env_step.action_masks[i], self.rngs[i], self.greedy)
            new_h[i], new_z[i] = decision.h, decision.z
            actions[i] = decision.action
            self.last_logits[i] = decision.logits
            ran[i] = True
        self.h, self.z = new_h, new_z
        self.a = torch.as_tensor(actions)
        self.sending = ran
        return actions


# =============================================================================
# EPISODES
# =============================================================================

@dataclass
class ExecutionResult:
    actions: np.ndarray                       # [T, n]
    rewards: np.ndarray                       # [T, n]
    logits: List[List[Optional[torch.Tensor]]]
    success: float
    ledger: BandwidthLedger
    alive_agent_steps: int

    @property
    def steps(self) -> int:
        return self.actions.shape[0]

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum(axis=0).mean()) if self.steps else 0.0


def run_centralized(env: MultiAgentEnv, controller: CentralizedController, seed: int,
                    max_steps: Optional[int] = None) -> ExecutionResult:
    codec = MessageCodec.from_config(controller.config)
    ledger = BandwidthLedger(codec.payload_bits, codec.frame_size)
    step = env.reset(seed)
    controller.reset()
    actions_log, rewards_log, logits_log = [], [], []
    alive_steps = 0
    while not step.done and (max_steps is None or len(actions_log) < max_steps):
        actions = controller.step(step)
        for i in range(env.n_agents):
            if controller.sending[i]:
                ledger.record_frame(i, bool(step.alive[i]), framed=not controller.config.use_linear_comm)
        alive_steps += int(step.alive.sum())
        logits_log.append(list(controller.last_logits))
        step = env.step(actions)
        actions_log.append(actions)
        rewards_log.append(step.rewards)
    return _result(env, actions_log, rewards_log, logits_log, ledger, alive_steps)


def run_decentralized(env: MultiAgentEnv, runtimes: Sequence[AgentRuntime], bus: MessageBus, seed: int,
                      max_steps: Optional[int] = None, config: Optional[MambaConfig] = None) -> ExecutionResult:
    """Full episode with n runtimes exchanging frames over the bus"""
    config = config or runtimes[0]._config
    step = env.reset(seed)
    for runtime in runtimes:
        runtime.reset()
    linear = config.use_linear_comm
    if not linear:
        for runtime in runtimes:
            bus.publish(runtime.bootstrap_frame(), account=False)
    n = len(runtimes)
    sending = np.ones(n, dtype=bool)
    actions_log, rewards_log, logits_log = [], [], []
    alive_steps = 0
    t = 0
    while not step.done and (max_steps is None or t < max_steps):
        alive = step.alive
        running = [i for i in range(n) if alive[i] or config.broadcast_dead]
        actions = np.zeros(n, dtype=np.int64)
        if linear:
            # Summaries describe last step's (z, a), so every agent that sent then takes part
            mask = step.neighbor_mask & sending[None, :]
            senders = [i for i in range(n) if sending[i]]
            for i in senders:
                runtimes[i].begin_linear_step()
            for layer in range(config.comm_layers):
                for i in senders:
                    bus.publish_summary(runtimes[i].summary(layer))
                inbox = bus.deliver_summaries(mask, t)
                for i in senders:
                    runtimes[i].absorb_summaries(layer, inbox[i])
            for i in running:
                actions[i] = runtimes[i].finish_linear_step(step.obs[i], step.action_masks[i], bool(alive[i]))
                bus.ledger.record_frame(i, bool(alive[i]), framed=False)
        else:
            inbox = bus.deliver(step.neighbor_mask, t)
            for i in running:
                actions[i], frame = runtimes[i].runtime_step(step.obs[i], step.action_masks[i], inbox[i], bool(alive[i]))
                bus.publish(frame)
        logits_log.append([runtimes[i].last_logits if i in running else None for i in range(n)])
        sending = np.array([i in running for i in range(n)])
        alive_steps += int(alive.sum())
        step = env.step(actions)
        actions_log.append(actions)
        rewards_log.append(step.rewards)
        t += 1
    return _result(env, actions_log, rewards_log, logits_log, bus.ledger, alive_steps)


def _result(env, actions_log, rewards_log, logits_log, ledger, alive_steps) -> ExecutionResult:
    n = env.n_agents
    return ExecutionResult(
        actions=np.array(actions_log, dtype=np.int64).reshape(-1, n),
        rewards=np.array(rewards_log, dtype=np.float32).reshape(-1, n),
        logits=logits_log,
        success=env.success(),
        ledger=ledger,
        alive_agent_steps=alive_steps,
    )


def make_runtimes(bundle: AgentBundle, rng: RngStream, greedy: bool = False) -> List[AgentRuntime]:
    config = bundle.config
    return [AgentRuntime(i, bundle.model, bundle.actor, config, rng.substream(f"agent-{i}"), greedy)
            for i in range(config.n_agents)]


# =============================================================================
# EQUIVALENCE HARNESS
# =============================================================================

class DivergenceDetail(BaseModel):
    step: int
    agent: int
    central_action: int
    decentralized_action: int
    central_logits: List[Optional[float]]
    decentralized_logits: List[Optional[float]]
    max_abs_diff: float


class EquivalenceReport(BaseModel):
    seed: int
    mode: str
    steps: int
    equivalent: bool
    payload_bits: int
    alive_agent_steps: int
    framed_bytes: int
    summary_bytes: int
    divergence: Optional[DivergenceDetail] = None


def _plain(logits: Optional[torch.Tensor]) -> List[Optional[float]]:
    if logits is None:
        return []
    return [float(v) if np.isfinite(float(v)) else None for v in logits.tolist()]


def _logits_match(a: Optional[torch.Tensor], b: Optional[torch.Tensor], exact: bool) -> Tuple[bool, float]:
    if a is None or b is None:
        return a is None and b is None, 0.0
    finite = torch.isfinite(a)
    if not torch.equal(finite, torch.isfinite(b)):
        return False, float("inf")
    diff = float((a[finite] - b[finite]).abs().max()) if bool(finite.any()) else 0.0
    if exact:
        return torch.equal(a, b), diff
    return diff <= 1e-6, diff


def equivalence_harness(checkpoint: Union[str, AgentBundle], env: Optional[MultiAgentEnv] = None, seed: int = 0,
                        steps: int = 50, fault: Optional[FaultHook] = None, greedy: bool = False,
                        raise_on_divergence: bool = False) -> EquivalenceReport:
    """
    Run one seeded episode centrally and through n runtimes plus a bus.

    Exact mode compares logits bit for bit; linear-exchange mode within 1e-6
    with identical actions. The first disagreement is reported.
    """
    bundle = load_bundle(checkpoint)[0] if isinstance(checkpoint, str) else checkpoint
    config = bundle.config
    if bundle.model is None:
        raise ConfigError("the equivalence harness needs a world-model checkpoint")
    env = env or make_env(config)
    if env.n_agents != config.n_agents or env.n_actions != bundle.n_actions or env.obs_size != bundle.obs_size:
        raise ConfigError("environment does not match the checkpoint")
    exact = not config.use_linear_comm
    rng = RngStream(seed, "execution")

    bundle.model.eval()
    controller = CentralizedController(bundle.model, bundle.actor, config, rng, greedy)
    central = run_centralized(env, controller, seed, steps)

    bus = MessageBus(config.n_agents, MessageCodec.from_config(config), fault=fault)
    decentral = run_decentralized(env, make_runtimes(bundle, rng, greedy), bus, seed, steps, config)

    divergence = None
    for t in range(max(central.steps, decentral.steps)):
        if t >= central.steps or t >= decentral.steps:
            divergence = DivergenceDetail(step=t, agent=-1, central_action=-1, decentralized_action=-1,
                                          central_logits=[], decentralized_logits=[], max_abs_diff=float("inf"))
            break
        for i in range(config.n_agents):
            ok, diff = _logits_match(central.logits[t][i], decentral.logits[t][i], exact)
            same_action = central.actions[t, i] == decentral.actions[t, i]
            if not ok or not same_action:
                divergence = DivergenceDetail(
                    step=t, agent=i,
                    central_action=int(central.actions[t, i]),
                    decentralized_action=int(decentral.actions[t, i]),
                    central_logits=_plain(central.logits[t][i]),
                    decentralized_logits=_plain(decentral.logits[t][i]),
                    max_abs_diff=diff,
                )
                break
        if divergence is not None:
            break

    report = EquivalenceReport(
        seed=seed,
        mode="exact" if exact else "linear",
        steps=decentral.steps,
        equivalent=divergence is None,
        payload_bits=decentral.ledger.alive_payload_bits,
        alive_agent_steps=decentral.alive_agent_steps,
        framed_bytes=decentral.ledger.framed_bytes,
        summary_bytes=decentral.ledger.summary_bytes,
        divergence=divergence,
    )
    if divergence is not None and raise_on_divergence:
        raise DivergenceError(f"centralized and decentralized execution diverge at step {divergence.step}, "
                              f"agent {divergence.agent}", report)
    return report
