"""
Training orchestration.

One iteration of the MAMBA loop:
1. collect one trajectory with the stochastic policy into the replay buffer
2. fit the world model for `model_epochs` sampled batches
3. dream from posterior start states and run `ppo_updates` PPO updates
Greedy evaluation runs every `eval_every` real environment steps.

The model-free baseline (algo=ppo-mf) swaps 1-3 for PPO on real rollouts of
raw observations and keeps the same metrics schema.
"""
import csv
import math
import os
import warnings
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from pydantic import BaseModel

from buffer import EpisodeBuilder, ReplayBuffer
from communication import MessageCodec
from core import (
    RUNS_DIR, Algo, ConfigError, EvalMode, InvalidInputError, MambaConfig, RngStream, write_manifest,
)
from envs import EnvStep, MultiAgentEnv, make_env
from exec_runtime import (
    AgentBundle, CentralizedController, MessageBus, build_bundle, load_bundle, make_runtimes,
    run_centralized, run_decentralized,
)
from imagination import dream, dump_trajectory, select_start_states
from policy import PPOBatch, PPOUpdater, gae
from world_model import WorldModelTrainer, save_checkpoint

METRICS_HEADER = [
    "algo", "seed", "env_steps", "episodes", "mean_return", "return_std", "success_rate", "success_std",
    "obs_nll", "reward_nll", "discount_nll", "kl", "info", "action_mask_nll", "model_total",
    "entropy", "bits_transmitted", "note",
]

UPDATES_HEADER = [
    "update", "env_steps", "policy_loss", "value_loss", "entropy", "entropy_coef",
    "mean_ratio", "clip_fraction", "transitions",
]


class RunMetrics(BaseModel):
    """One evaluation point"""

    algo: str
    seed: int
    env_steps: int
    episodes: int
    mean_return: Optional[float] = None
    return_std: Optional[float] = None
    success_rate: Optional[float] = None
    success_std: Optional[float] = None
    obs_nll: Optional[float] = None
    reward_nll: Optional[float] = None
    discount_nll: Optional[float] = None
    kl: Optional[float] = None
    info: Optional[float] = None
    action_mask_nll: Optional[float] = None
    model_total: Optional[float] = None
    entropy: Optional[float] = None
    bits_transmitted: Optional[float] = None
    note: str = ""

    def as_row(self) -> List[str]:
        data = self.model_dump()
        return ["" if data[key] is None else _cell(data[key]) for key in METRICS_HEADER]


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(round(value, 6))
    return str(value)


def _append_csv(path: str, header: Sequence[str], row: Sequence) -> None:
    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(header)
        writer.writerow(row)


def continuing_agents(alive: np.ndarray, nxt: EnvStep) -> np.ndarray:
    """Agents whose value is bootstrapped after this transition; a step-limit cut keeps the living ones"""
    still_alive = alive & nxt.alive
    if nxt.done and not nxt.truncated:
        return np.zeros_like(still_alive)
    return still_alive


# =============================================================================
# EVALUATION
# =============================================================================

def _check_env(bundle: AgentBundle, env: MultiAgentEnv) -> None:
    config = bundle.config
    if env.name != config.env or env.n_agents != config.n_agents:
        raise ConfigError(f"checkpoint was trained on {config.env.value} with {config.n_agents} agents, "
                          f"got {env.name.value} with {env.n_agents}")
    if env.obs_size != bundle.obs_size or env.n_actions != bundle.n_actions:
        raise ConfigError(f"environment shapes ({env.obs_size}, {env.n_actions}) do not match "
                          f"the checkpoint ({bundle.obs_size}, {bundle.n_actions})")


def _run_model_free(bundle: AgentBundle, env: MultiAgentEnv, seed: int):
    step = env.reset(seed)
    total = np.zeros(env.n_agents, dtype=np.float64)
    with torch.no_grad():
        while not step.done:
            obs = torch.as_tensor(step.obs, dtype=torch.float32)
            masks = torch.as_tensor(step.action_masks, dtype=torch.bool)
            actions = bundle.actor.act(obs, masks, greedy=True).action.numpy()
            step = env.step(actions)
            total += step.rewards
    return float(total.mean()), env.success(), 0


def evaluate_bundle(bundle: AgentBundle, env: MultiAgentEnv, episodes: int,
                    mode: Union[EvalMode, str] = EvalMode.CENTRAL, seed: int = 0) -> Dict[str, List[float]]:
    """Greedy episodes; per-episode returns, success values and payload bits"""
    mode = EvalMode(mode)
    rng = RngStream(seed, "evaluation")
    results = {"returns": [], "success": [], "bits": []}
    for k in range(episodes):
        episode_seed = rng.randint(2**31)
        if bundle.model is None:
            ret, success, bits = _run_model_free(bundle, env, episode_seed)
        else:
            stream = rng.substream(f"episode-{k}")
            if mode == EvalMode.CENTRAL:
                controller = CentralizedController(bundle.model, bundle.actor, bundle.config, stream, greedy=True)
                outcome = run_centralized(env, controller, episode_seed)
            else:
                bus = MessageBus(env.n_agents, MessageCodec.from_config(bundle.config))
                outcome = run_decentralized(env, make_runtimes(bundle, stream, greedy=True), bus,
                                            episode_seed, config=bundle.config)
            ret, success, bits = outcome.episode_return, outcome.success, outcome.ledger.alive_payload_bits
        results["returns"].append(ret)
        results["success"].append(success)
        results["bits"].append(bits)
    return results


def evaluate(checkpoint: Union[str, AgentBundle], env: Optional[MultiAgentEnv] = None, episodes: int = 10,
             mode: Union[EvalMode, str] = EvalMode.CENTRAL, seed: int = 0, env_steps: int = 0) -> RunMetrics:
    if isinstance(checkpoint, str):
        bundle, state = load_bundle(checkpoint)
        env_steps = state.get("counters", {}).get("env_steps", env_steps)
    else:
        bundle = checkpoint
    env = env or make_env(bundle.config)
    _check_env(bundle, env)
    row = RunMetrics(algo=bundle.config.algo.value, seed=seed, env_steps=env_steps, episodes=episodes)
    if episodes <= 0:
        row.note = "no episodes requested"
        return row
    results = evaluate_bundle(bundle, env, episodes, mode, seed)
    row.mean_return = float(np.mean(results["returns"]))
    row.return_std = float(np.std(results["returns"]))
    row.success_rate = float(np.mean(results["success"]))
    row.success_std = float(np.std(results["success"]))
    row.bits_transmitted = float(np.mean(results["bits"]))
    return row


# =============================================================================
# TRAINER
# =============================================================================

class Trainer:
    """Sequential collect / model / dream / PPO loop with single-writer updates"""

    def __init__(self, config: MambaConfig, out_dir: Optional[str] = None, verbose: bool = True,
                 dump_dreams: bool = False):
        self.config = config
        self.out_dir = out_dir or os.path.join(RUNS_DIR, f"{config.env.value}-{config.algo.value}-s{config.seed}")
        self.verbose = verbose
        self.dump_dreams = dump_dreams
        self.env = make_env(config)
        self.bundle = build_bundle(config, self.env)
        self.buffer = ReplayBuffer(config.buffer_size, config.n_agents)
        self.model_trainer = WorldModelTrainer(self.bundle.model, config) if self.bundle.model is not None else None
        self.ppo = PPOUpdater(self.bundle.actor, self.bundle.critic, config)
        self.rng = RngStream(config.seed, "train")
        self.env_steps = 0
        self.iteration = 0
        self.episodes = 0
        self.next_eval = config.eval_every
        self.last_model_metrics: Dict[str, float] = {}
        self.last_ppo_metrics: Dict[str, float] = {}
        self.history: List[RunMetrics] = []

    # ------------------------------------------------------------------ paths

    @property
    def metrics_path(self) -> str:
        return os.path.join(self.out_dir, "metrics.csv")

    @property
    def updates_path(self) -> str:
        return os.path.join(self.out_dir, "updates.csv")

    @property
    def checkpoint_path(self) -> str:
        return os.path.join(self.out_dir, "checkpoint.bin")

    @property
    def buffer_path(self) -> str:
        return os.path.join(self.out_dir, "buffer.bin")

    def _log(self, message: str) -> None:
        if self.verbose:
            print(message)

    # ---------------------------------------------------------------- collect

    def collect(self, rng: RngStream) -> int:
        """One stochastic trajectory into the buffer; returns its length"""
        config = self.config
        env = self.env
        controller = CentralizedController(self.bundle.model, self.bundle.actor, config, rng.substream("collect"))
        step = env.reset(rng.randint(2**31))
        builder = EpisodeBuilder(env.n_agents, env.obs_size, env.n_actions, config.gamma)
        while not step.done:
            actions = controller.step(step)
            nxt = env.step(actions)
            builder.add_transition(step, actions, nxt)
            step = nxt
        episode = builder.build()
        self.buffer.add_episode(episode)
        self.episodes += 1
        self.env_steps += len(episode)
        return len(episode)

    # ------------------------------------------------------------------ model

    def train_model(self, rng: RngStream) -> Dict[str, float]:
        config = self.config
        totals: Dict[str, float] = {}
        for _ in range(config.model_epochs):
            batch = self.buffer.sample_sequences(config.n_rollouts, config.seq_len, rng)
            metrics = self.model_trainer.train_step(batch, rng)
            for key, value in metrics.items():
                totals[key] = totals.get(key, 0.0) + value
        self.last_model_metrics = {key: value / config.model_epochs for key, value in totals.items()}
        return self.last_model_metrics

    # ----------------------------------------------------------------- policy

    def train_policy(self, rng: RngStream) -> None:
        config = self.config
        model = self.bundle.model
        for u in range(config.ppo_updates):
            batches = []
            for _ in range(config.trajectories_per_update):
                start = select_start_states(self.buffer, model, config.n_rollouts, config.seq_len, rng)
                trajectory = dream(model, self.bundle.actor, start, config.horizon, rng, config)
                if self.dump_dreams and u == 0:
                    dump_trajectory(trajectory, os.path.join(self.out_dir, "dreams.jsonl"),
                                    config.n_categoricals, config.n_classes, update=self.ppo.updates)
                batches.append(trajectory.to_ppo_batch(self.bundle.critic, config))
            self._ppo_step(PPOBatch.concat(batches), rng)

    def _ppo_step(self, batch: PPOBatch, rng: RngStream) -> None:
        metrics = self.ppo.update(batch, rng)
        self.last_ppo_metrics = metrics
        _append_csv(self.updates_path, UPDATES_HEADER, [
            self.ppo.updates, self.env_steps,
            *(_cell(float(metrics[key])) for key in UPDATES_HEADER[2:-1]),
            int(metrics["transitions"]),
        ])

    # ------------------------------------------------------------- model-free

    def collect_model_free(self, rng: RngStream) -> PPOBatch:
        """`mf_rollout_steps` real steps on raw observations, GAE per episode segment"""
        config = self.config
        env = self.env
        actor, critic = self.bundle.actor, self.bundle.critic
        segments = []
        steps = 0
        while steps < config.mf_rollout_steps:
            step = env.reset(rng.randint(2**31))
            rows = {"obs": [], "actions": [], "masks": [], "log_probs": [], "rewards": [], "discounts": [], "alive": []}
            with torch.no_grad():
                while not step.done and steps < config.mf_rollout_steps:
                    obs = torch.as_tensor(step.obs, dtype=torch.float32)
                    masks = torch.as_tensor(step.action_masks, dtype=torch.bool)
                    out = actor.act(obs, masks, rng)
                    alive = step.alive.copy()
                    nxt = env.step(out.action.numpy())
                    next_alive = continuing_agents(alive, nxt)
                    rows["obs"].append(obs)
                    rows["actions"].append(out.action)
                    rows["masks"].append(masks)
                    rows["log_probs"].append(out.log_prob)
                    rows["rewards"].append(torch.as_tensor(np.where(alive, nxt.rewards, 0.0), dtype=torch.float32))
                    rows["discounts"].append(torch.as_tensor(config.gamma * next_alive, dtype=torch.float32))
                    rows["alive"].append(torch.as_tensor(alive))
                    step = nxt
                    steps += 1
                    self.env_steps += 1
            if step.done:
                self.episodes += 1
            if rows["obs"]:
                segments.append(self._segment_batch(rows, torch.as_tensor(step.obs, dtype=torch.float32)))
        return PPOBatch.concat(segments)

    def _segment_batch(self, rows: Dict[str, list], last_obs: torch.Tensor) -> PPOBatch:
        critic = self.bundle.critic
        obs = torch.stack(rows["obs"])
        rewards = torch.stack(rows["rewards"])
        discounts = torch.stack(rows["discounts"])
        with torch.no_grad():
            values = critic(torch.cat([obs, last_obs.unsqueeze(0)]))
            advantages = gae(rewards, values, discounts, self.config.gae_lambda)
        return PPOBatch(
            actor_inputs=obs,
            critic_inputs=obs,
            actions=torch.stack(rows["actions"]),
            action_masks=torch.stack(rows["masks"]),
            log_probs=torch.stack(rows["log_probs"]),
            advantages=advantages,
            returns=advantages + values[:-1],
            active=torch.stack(rows["alive"]),
        )

    # -------------------------------------------------------------- iteration

    def iteration_step(self) -> None:
        rng = self.rng.substream(f"iter-{self.iteration}")
        torch.manual_seed(rng.randint(2**31))
        if self.config.algo == Algo.MAMBA:
            self.collect(rng)
            self.train_model(rng)
            self.train_policy(rng)
        else:
            self._ppo_step(self.collect_model_free(rng), rng)
        self.iteration += 1

    def evaluate_now(self) -> RunMetrics:
        config = self.config
        row = evaluate(self.bundle, self.env, config.eval_episodes, EvalMode.CENTRAL, config.seed, self.env_steps)
        row.episodes = config.eval_episodes
        losses = self.last_model_metrics
        if losses:
            row.obs_nll = losses.get("obs_nll")
            row.reward_nll = losses.get("reward_nll")
            row.discount_nll = losses.get("discount_nll")
            row.kl = losses.get("kl")
            row.info = losses.get("info")
            row.action_mask_nll = losses.get("action_mask_nll")
            row.model_total = losses.get("total")
        if self.last_ppo_metrics:
            row.entropy = self.last_ppo_metrics.get("entropy")
        _append_csv(self.metrics_path, METRICS_HEADER, row.as_row())
        self.history.append(row)
        self._log(f"📊 step {self.env_steps}: return {_fmt(row.mean_return)}, success {_fmt(row.success_rate)}")
        return row

    def run(self) -> List[RunMetrics]:
        config = self.config
        os.makedirs(self.out_dir, exist_ok=True)
        write_manifest(config, os.path.join(self.out_dir, "manifest.txt"), {
            **self.env.spec_dict(),
            "collection_policy": "stochastic",
            "evaluation_policy": "greedy",
        })
        self._log(f"✅ {config.algo.value} on {config.env.value} with {config.n_agents} agents, "
                  f"seed {config.seed} -> {self.out_dir}")
        while self.env_steps < config.total_steps:
            self.iteration_step()
            if self.env_steps >= self.next_eval:
                self.evaluate_now()
                while self.next_eval <= self.env_steps:
                    self.next_eval += config.eval_every
                self.save()
        if not self.history or self.history[-1].env_steps != self.env_steps:
            self.evaluate_now()
        self.save()
        return self.history

    # ------------------------------------------------------------- checkpoint

    def state_dict(self) -> Dict:
        state = {
            "actor": self.bundle.actor.state_dict(),
            "critic": self.bundle.critic.state_dict(),
            "ppo": self.ppo.state_dict(),
            "counters": {
                "env_steps": self.env_steps,
                "iteration": self.iteration,
                "episodes": self.episodes,
                "next_eval": self.next_eval,
            },
            "last_model_metrics": dict(self.last_model_metrics),
            "last_ppo_metrics": dict(self.last_ppo_metrics),
            "buffer_file": os.path.basename(self.buffer_path),
            "dump_dreams": self.dump_dreams,
        }
        if self.bundle.model is not None:
            state["model"] = self.bundle.model.state_dict()
            state["model_trainer"] = self.model_trainer.state_dict()
        return state

    def save(self) -> None:
        save_checkpoint(self.checkpoint_path, self.config, self.state_dict())
        self.buffer.dump(self.buffer_path)
        self._log(f"💾 checkpoint at {self.env_steps} env steps")

    @classmethod
    def resume(cls, checkpoint: str, out_dir: Optional[str] = None, verbose: bool = True,
               dump_dreams: Optional[bool] = None, **overrides) -> "Trainer":
        """
        Restore parameters, optimizers, counters and the buffer dump next to the checkpoint.

        dump_dreams=None keeps the setting the run was saved with.
        """
        bundle, state = load_bundle(checkpoint)
        config = bundle.config.with_updates(**overrides) if overrides else bundle.config
        if dump_dreams is None:
            dump_dreams = bool(state.get("dump_dreams", False))
        trainer = cls(config, out_dir or os.path.dirname(os.path.abspath(checkpoint)), verbose, dump_dreams)
        trainer.bundle.actor.load_state_dict(state["actor"])
        trainer.bundle.critic.load_state_dict(state["critic"])
        trainer.ppo.load_state_dict(state["ppo"])
        if trainer.bundle.model is not None:
            trainer.bundle.model.load_state_dict(state["model"])
            trainer.model_trainer.load_state_dict(state["model_trainer"])
        counters = state["counters"]
        trainer.env_steps = counters["env_steps"]
        trainer.iteration = counters["iteration"]
        trainer.episodes = counters["episodes"]
        trainer.next_eval = counters["next_eval"]
        trainer.last_model_metrics = dict(state.get("last_model_metrics", {}))
        trainer.last_ppo_metrics = dict(state.get("last_ppo_metrics", {}))
        buffer_path = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), state["buffer_file"])
        if os.path.exists(buffer_path):
            trainer.buffer = ReplayBuffer.restore(buffer_path)
        elif trainer.bundle.model is not None:
            trainer._log(f"⚠️ no buffer dump at {buffer_path}, resuming with an empty buffer")
        return trainer


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def train(config: MambaConfig, out_dir: Optional[str] = None, verbose: bool = True,
          dump_dreams: bool = False) -> List[RunMetrics]:
    return Trainer(config, out_dir, verbose, dump_dreams).run()


# =============================================================================
# PLOTS
# =============================================================================

def read_metrics_csv(path: str) -> Dict[str, object]:
    """Parse one metrics CSV; errors name the offending line"""
    if not os.path.exists(path):
        raise InvalidInputError(f"{path}: file not found")
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidInputError(f"{path}:1: empty file")
        missing = [key for key in ("algo", "seed", "env_steps", "mean_return", "success_rate") if key not in header]
        if missing:
            raise InvalidInputError(f"{path}:1: header lacks {', '.join(missing)}")
        index = {key: header.index(key) for key in header}
        steps, returns, success = [], [], []
        algo = None
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise InvalidInputError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            try:
                step = int(row[index["env_steps"]])
                ret = float(row[index["mean_return"]]) if row[index["mean_return"]] else math.nan
                rate = float(row[index["success_rate"]]) if row[index["success_rate"]] else math.nan
            except ValueError as e:
                raise InvalidInputError(f"{path}:{line}: {e}") from e
            if steps and step <= steps[-1]:
                raise InvalidInputError(f"{path}:{line}: env_steps {step} does not increase (previous {steps[-1]})")
            algo = algo or row[index["algo"]]
            steps.append(step)
            returns.append(ret)
            success.append(rate)
    if not steps:
        raise InvalidInputError(f"{path}: no metric rows")
    return {"algo": algo, "steps": np.array(steps), "mean_return": np.array(returns),
            "success_rate": np.array(success)}


def plot(csv_paths: Sequence[str], out_dir: str) -> List[str]:
    """Mean over seeds per algorithm with a min-max band; one image per metric"""
    if not csv_paths:
        raise InvalidInputError("plot needs at least one metrics CSV")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = [read_metrics_csv(path) for path in csv_paths]
    by_algo: Dict[str, List[Dict]] = {}
    for run in runs:
        by_algo.setdefault(run["algo"], []).append(run)

    os.makedirs(out_dir, exist_ok=True)
    written = []
    for metric, label in (("mean_return", "mean episodic return"), ("success_rate", "success rate")):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for algo, group in sorted(by_algo.items()):
            grid = np.unique(np.concatenate([run["steps"] for run in group]))
            curves = np.full((len(group), grid.shape[0]), np.nan)
            for k, run in enumerate(group):
                inside = (grid >= run["steps"][0]) & (grid <= run["steps"][-1])
                curves[k, inside] = np.interp(grid[inside], run["steps"], run[metric])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", category=RuntimeWarning)
                mean = np.nanmean(curves, axis=0)
                low = np.nanmin(curves, axis=0)
                high = np.nanmax(curves, axis=0)
            line, = ax.plot(grid, mean, label=f"{algo} ({len(group)} seed{'s' if len(group) > 1 else ''})")
            if len(group) > 1:
                ax.fill_between(grid, low, high, color=line.get_color(), alpha=0.2)
        ax.set_xlabel("environment steps")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
        ax.legend()
        path = os.path.join(out_dir, f"{metric}.png")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
