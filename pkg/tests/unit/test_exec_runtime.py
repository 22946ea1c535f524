"""
Unit tests for decentralized execution: runtimes, the message bus,
bandwidth accounting and the centralized/decentralized equivalence harness.
"""
import numpy as np
import pytest

import sys
sys.path.insert(0, '.')
from communication import MessageCodec
from core import CodecError, ConfigError, DivergenceError, ProtocolError, RngStream
from exec_runtime import (
    CentralizedController, MessageBus, build_bundle, equivalence_harness, flip_bit_fault, make_runtimes,
    read_bus_log, run_centralized, run_decentralized,
)
from tests.fixtures import IdleEnv, tiny_config


def _idle_bundle(n_agents: int = 2, **overrides):
    config = tiny_config(n_agents=n_agents, **overrides)
    return build_bundle(config, IdleEnv(n_agents=n_agents))


def _decentralized(bundle, env, seed: int = 0, log_path=None, fault=None):
    config = bundle.config
    bus = MessageBus(config.n_agents, MessageCodec.from_config(config), log_path=log_path, fault=fault)
    result = run_decentralized(env, make_runtimes(bundle, RngStream(seed, "execution")), bus, seed)
    bus.close()
    return result


# =============================================================================
# EQUIVALENCE
# =============================================================================

@pytest.mark.unit
def test_central_and_decentralized_agree_exactly():
    bundle = _idle_bundle()
    report = equivalence_harness(bundle, IdleEnv(), seed=3)
    assert report.equivalent
    assert report.mode == "exact"
    assert report.steps == 10
    assert report.divergence is None


@pytest.mark.unit
def test_agreement_under_partial_locality():
    bundle = _idle_bundle(n_agents=3)
    env = IdleEnv(n_agents=3, radius_neighbors=[{0, 1}, {0, 1}, {2}])
    assert equivalence_harness(bundle, env, seed=1).equivalent


@pytest.mark.unit
@pytest.mark.parametrize("broadcast_dead", [True, False])
def test_agreement_with_deaths(broadcast_dead):
    bundle = _idle_bundle(n_agents=3, broadcast_dead=broadcast_dead)
    env = IdleEnv(n_agents=3, deaths={1: 3, 2: 6})
    assert equivalence_harness(bundle, env, seed=2).equivalent


@pytest.mark.unit
def test_greedy_agreement():
    bundle = _idle_bundle()
    assert equivalence_harness(bundle, IdleEnv(), seed=0, greedy=True).equivalent


@pytest.mark.unit
@pytest.mark.parametrize("broadcast_dead", [True, False])
def test_linear_exchange_agrees_within_tolerance(broadcast_dead):
    bundle = _idle_bundle(n_agents=3, use_linear_comm=True, broadcast_dead=broadcast_dead)
    env = IdleEnv(n_agents=3, deaths={2: 4})
    report = equivalence_harness(bundle, env, seed=5)
    assert report.mode == "linear"
    assert report.equivalent, report.divergence
    assert report.summary_bytes > 0


@pytest.mark.unit
def test_flipped_bit_is_reported_at_the_right_place():
    bundle = _idle_bundle()
    fault = flip_bit_fault(step=3, recipient=1, bit=0, sender=0)
    report = equivalence_harness(bundle, IdleEnv(), seed=0, fault=fault)
    assert not report.equivalent
    assert report.divergence.step == 3
    assert report.divergence.agent == 1
    assert report.divergence.max_abs_diff > 0

    with pytest.raises(DivergenceError) as info:
        equivalence_harness(bundle, IdleEnv(), seed=0, fault=fault, raise_on_divergence=True)
    assert info.value.report.divergence.step == 3


@pytest.mark.unit
def test_harness_rejects_mismatched_environment():
    bundle = _idle_bundle()
    with pytest.raises(ConfigError):
        equivalence_harness(bundle, IdleEnv(n_agents=3))
    mf = tiny_config(algo="ppo-mf")
    with pytest.raises(ConfigError):
        equivalence_harness(build_bundle(mf, IdleEnv()), IdleEnv())


# =============================================================================
# BANDWIDTH
# =============================================================================

@pytest.mark.unit
def test_every_alive_agent_step_costs_one_message():
    bundle = _idle_bundle()
    result = _decentralized(bundle, IdleEnv())
    bits = bundle.config.message_bits
    assert result.alive_agent_steps == 20
    assert result.ledger.alive_payload_bits == 20 * bits
    assert result.ledger.per_agent_bits == {0: 10 * bits, 1: 10 * bits}
    assert result.ledger.framed_bytes == 20 * MessageCodec.from_config(bundle.config).frame_size


@pytest.mark.unit
def test_dead_agents_are_not_charged():
    bits = tiny_config().message_bits
    quiet = _idle_bundle(broadcast_dead=False)
    result = _decentralized(quiet, IdleEnv(deaths={1: 3}))
    assert result.ledger.per_agent_bits == {0: 10 * bits, 1: 3 * bits}
    assert result.ledger.frames == 13

    loud = _idle_bundle(broadcast_dead=True)
    result = _decentralized(loud, IdleEnv(deaths={1: 3}))
    assert result.ledger.alive_payload_bits == 13 * bits
    assert result.ledger.total_payload_bits == 20 * bits


@pytest.mark.unit
def test_central_ledger_matches_the_bus():
    bundle = _idle_bundle(broadcast_dead=False)
    env = IdleEnv(deaths={0: 5})
    controller = CentralizedController(bundle.model, bundle.actor, bundle.config, RngStream(0, "execution"))
    central = run_centralized(env, controller, 0)
    decentral = _decentralized(bundle, env)
    assert central.ledger.alive_payload_bits == decentral.ledger.alive_payload_bits
    assert central.ledger.frames == decentral.ledger.frames


@pytest.mark.unit
def test_linear_exchange_counts_summaries_not_frames():
    bundle = _idle_bundle(use_linear_comm=True, broadcast_dead=False)
    env = IdleEnv(deaths={1: 4})
    result = _decentralized(bundle, env)
    ledger = result.ledger
    assert ledger.frames == 0
    assert ledger.framed_bytes == 0
    assert ledger.summary_bytes > 0
    # Frame-equivalent payload: one message per alive agent-step
    assert ledger.alive_payload_bits == bundle.config.message_bits * result.alive_agent_steps

    controller = CentralizedController(bundle.model, bundle.actor, bundle.config, RngStream(0, "execution"))
    central = run_centralized(env, controller, 0)
    assert central.ledger.framed_bytes == 0
    assert central.ledger.alive_payload_bits == ledger.alive_payload_bits


# =============================================================================
# RUNTIME PROTOCOL
# =============================================================================

@pytest.mark.unit
def test_runtime_needs_its_own_echo():
    bundle = _idle_bundle()
    runtimes = make_runtimes(bundle, RngStream(0))
    only_peer = [runtimes[1].bootstrap_frame()]
    with pytest.raises(ProtocolError, match="own"):
        runtimes[0].runtime_step(np.zeros(4), np.ones(3, dtype=bool), only_peer)


@pytest.mark.unit
def test_runtime_rejects_stale_steps_and_duplicates():
    bundle = _idle_bundle()
    runtime = make_runtimes(bundle, RngStream(0))[0]
    codec = runtime.codec
    stale = [codec.encode(0, 5, [0] * 4, 0, True)]
    with pytest.raises(ProtocolError, match="step"):
        runtime.runtime_step(np.zeros(4), np.ones(3, dtype=bool), stale)
    own = runtime.bootstrap_frame()
    with pytest.raises(ProtocolError, match="duplicate"):
        runtime.runtime_step(np.zeros(4), np.ones(3, dtype=bool), [own, own])


@pytest.mark.unit
def test_inbox_order_does_not_matter():
    bundle = _idle_bundle()
    obs, mask = np.linspace(-1, 1, 4), np.ones(3, dtype=bool)
    a = make_runtimes(bundle, RngStream(0))
    b = make_runtimes(bundle, RngStream(0))
    frames = [a[0].bootstrap_frame(), a[1].bootstrap_frame()]
    first = a[0].runtime_step(obs, mask, frames)
    second = b[0].runtime_step(obs, mask, list(reversed(frames)))
    assert first == second


@pytest.mark.unit
def test_runtime_frames_carry_the_next_step():
    bundle = _idle_bundle()
    runtime = make_runtimes(bundle, RngStream(0))[0]
    action, frame = runtime.runtime_step(np.zeros(4), np.ones(3, dtype=bool), [runtime.bootstrap_frame()])
    message = runtime.codec.decode(frame)
    assert (message.agent_id, message.step, message.action, message.alive) == (0, 1, action, True)


# =============================================================================
# BUS
# =============================================================================

@pytest.mark.unit
def test_bus_routes_by_locality_and_sorts_by_sender():
    codec = MessageCodec(4, 4)
    bus = MessageBus(3, codec)
    for agent in (2, 0, 1):
        bus.publish(codec.encode(agent, 0, [0] * 4, 0))
    mask = np.array([[True, True, False], [True, True, True], [False, False, True]])
    inbox = bus.deliver(mask, 0)
    assert [codec.decode(f).agent_id for f in inbox[0]] == [0, 1]
    assert [codec.decode(f).agent_id for f in inbox[1]] == [0, 1, 2]
    assert [codec.decode(f).agent_id for f in inbox[2]] == [2]
    assert bus.deliver(mask, 1) == {0: [], 1: [], 2: []}


@pytest.mark.unit
def test_bus_rejects_bad_frames():
    codec = MessageCodec(4, 4)
    bus = MessageBus(2, codec)
    with pytest.raises(CodecError):
        bus.publish(b"\x00" * 3)
    bus.publish(codec.encode(1, 0, [0] * 4, 0))
    with pytest.raises(ProtocolError, match="twice"):
        bus.publish(codec.encode(1, 0, [1] * 4, 2))


@pytest.mark.unit
def test_bus_log_round_trip(tmp_path):
    bundle = _idle_bundle()
    path = str(tmp_path / "logs" / "bus.bin")
    result = _decentralized(bundle, IdleEnv(), log_path=path)
    messages = read_bus_log(path, MessageCodec.from_config(bundle.config))
    # Two bootstrap frames, then one frame per agent and step
    assert len(messages) == 2 + 20
    assert [m.step for m in messages[:2]] == [0, 0]
    sent = [m.action for m in messages[2:] if m.agent_id == 0]
    assert sent == result.actions[:, 0].tolist()

    broken = tmp_path / "broken.bin"
    broken.write_bytes(b"\x00" * 5)
    with pytest.raises(CodecError):
        read_bus_log(str(broken), MessageCodec.from_config(bundle.config))
