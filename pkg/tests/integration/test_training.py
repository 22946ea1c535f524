"""
Integration tests for the training loop on the smoke configuration:
run outputs, resume determinism, the model-free baseline, evaluation and
plotting.
"""
import csv
import os

import numpy as np
import pytest
import torch

import sys
sys.path.insert(0, '.')
from core import ConfigError, EvalMode, InvalidInputError, read_manifest
from envs import EnvStep, SkirmishToy
from exec_runtime import equivalence_harness, load_bundle
from trainer import METRICS_HEADER, Trainer, continuing_agents, evaluate, plot, read_metrics_csv
from tests.fixtures import smoke_config


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("smoke"))
    trainer = Trainer(smoke_config(), out, verbose=False)
    trainer.run()
    return trainer


def _rows(path: str):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# =============================================================================
# RUN OUTPUTS
# =============================================================================

@pytest.mark.integration
@pytest.mark.slow
def test_run_writes_every_artifact(trained_run):
    out = trained_run.out_dir
    for name in ("metrics.csv", "updates.csv", "manifest.txt", "checkpoint.bin", "buffer.bin"):
        assert os.path.exists(os.path.join(out, name)), name
    manifest = read_manifest(os.path.join(out, "manifest.txt"))
    assert manifest["config_hash"] == trained_run.config.config_hash()
    assert manifest["evaluation_policy"] == "greedy"


@pytest.mark.integration
@pytest.mark.slow
def test_metrics_rows_follow_the_schedule(trained_run):
    rows = _rows(trained_run.metrics_path)
    assert list(rows[0].keys()) == METRICS_HEADER
    steps = [int(row["env_steps"]) for row in rows]
    assert steps == sorted(set(steps))
    assert steps[0] >= trained_run.config.eval_every
    assert steps[-1] == trained_run.env_steps >= trained_run.config.total_steps
    for row in rows:
        assert row["algo"] == "mamba"
        assert float(row["obs_nll"]) == float(row["obs_nll"])
        assert 0.0 <= float(row["success_rate"]) <= 1.0


@pytest.mark.integration
@pytest.mark.slow
def test_updates_log_one_row_per_ppo_update(trained_run):
    rows = _rows(trained_run.updates_path)
    assert len(rows) == trained_run.ppo.updates
    assert [int(row["update"]) for row in rows] == list(range(1, len(rows) + 1))


@pytest.mark.integration
@pytest.mark.slow
def test_trained_checkpoint_executes_decentrally(trained_run):
    report = equivalence_harness(trained_run.checkpoint_path, seed=4, steps=20)
    assert report.equivalent, report.divergence


# =============================================================================
# RESUME
# =============================================================================

@pytest.mark.integration
@pytest.mark.slow
def test_resume_reproduces_an_uninterrupted_run(tmp_path):
    straight = Trainer(smoke_config(total_steps=300), str(tmp_path / "straight"), verbose=False)
    straight.run()

    first = Trainer(smoke_config(total_steps=150, eval_every=150), str(tmp_path / "split"), verbose=False)
    first.run()
    resumed = Trainer.resume(first.checkpoint_path, verbose=False, total_steps=300, eval_every=250)
    resumed.run()

    assert resumed.env_steps == straight.env_steps
    assert resumed.iteration == straight.iteration
    for a, b in zip(straight.bundle.actor.parameters(), resumed.bundle.actor.parameters()):
        assert torch.equal(a, b)
    for a, b in zip(straight.bundle.model.parameters(), resumed.bundle.model.parameters()):
        assert torch.equal(a, b)


@pytest.mark.integration
def test_resume_keeps_dream_dumping(tmp_path):
    trainer = Trainer(smoke_config(), str(tmp_path / "dreamy"), verbose=False, dump_dreams=True)
    trainer.save()
    assert Trainer.resume(trainer.checkpoint_path, verbose=False).dump_dreams is True
    assert Trainer.resume(trainer.checkpoint_path, verbose=False, dump_dreams=False).dump_dreams is False

    plain = Trainer(smoke_config(), str(tmp_path / "plain"), verbose=False)
    plain.save()
    assert Trainer.resume(plain.checkpoint_path, verbose=False).dump_dreams is False


# =============================================================================
# MODEL-FREE BASELINE
# =============================================================================

@pytest.mark.unit
def test_time_limit_cut_keeps_bootstrapping_the_living():
    alive = np.array([True, True, False])

    def outcome(dones, done, truncated):
        return EnvStep(
            obs=np.zeros((3, 2)), rewards=np.zeros(3), dones=np.array(dones),
            action_masks=np.ones((3, 2), dtype=bool), neighbors=[{0, 1, 2}] * 3, done=done, truncated=truncated,
        )

    # Mid-episode: whoever is still alive continues
    assert continuing_agents(alive, outcome([False, True, True], False, False)).tolist() == [True, False, False]
    # Step limit reached with agents still running
    assert continuing_agents(alive, outcome([False, False, True], True, True)).tolist() == [True, True, False]
    # The episode finished on its own terms
    assert not continuing_agents(alive, outcome([False, False, True], True, False)).any()


@pytest.mark.integration
@pytest.mark.slow
def test_model_free_baseline_shares_the_schema(tmp_path):
    trainer = Trainer(smoke_config(algo="ppo-mf", total_steps=200), str(tmp_path), verbose=False)
    history = trainer.run()
    assert trainer.bundle.model is None
    assert history[-1].env_steps >= 200
    rows = _rows(trainer.metrics_path)
    assert list(rows[0].keys()) == METRICS_HEADER
    assert rows[-1]["algo"] == "ppo-mf"
    assert rows[-1]["obs_nll"] == ""
    assert rows[-1]["entropy"] != ""
    assert evaluate(trainer.checkpoint_path, episodes=1).mean_return is not None


# =============================================================================
# EVALUATION
# =============================================================================

@pytest.mark.integration
@pytest.mark.slow
def test_central_and_decentralized_evaluation_agree(trained_run):
    central = evaluate(trained_run.checkpoint_path, episodes=2, mode=EvalMode.CENTRAL)
    decentral = evaluate(trained_run.checkpoint_path, episodes=2, mode="decentralized")
    assert central.mean_return == decentral.mean_return
    assert central.success_rate == decentral.success_rate
    assert central.bits_transmitted == decentral.bits_transmitted
    assert central.env_steps == trained_run.env_steps


@pytest.mark.integration
@pytest.mark.slow
def test_evaluation_edge_cases(trained_run):
    row = evaluate(trained_run.checkpoint_path, episodes=0)
    assert row.note == "no episodes requested"
    assert row.mean_return is None
    bundle, _ = load_bundle(trained_run.checkpoint_path)
    with pytest.raises(ConfigError):
        evaluate(bundle, SkirmishToy(n_agents=2), episodes=1)


# =============================================================================
# PLOTS
# =============================================================================

@pytest.mark.integration
@pytest.mark.slow
def test_plot_writes_both_curves(trained_run, tmp_path):
    written = plot([trained_run.metrics_path], str(tmp_path / "plots"))
    assert sorted(os.path.basename(p) for p in written) == ["mean_return.png", "success_rate.png"]
    for path in written:
        assert os.path.getsize(path) > 0


@pytest.mark.integration
def test_plot_errors_name_the_line(tmp_path):
    path = tmp_path / "metrics.csv"
    path.write_text("algo,seed,env_steps,mean_return,success_rate\nmamba,0,10,1.0,0.5\nmamba,0,10,1.5,0.5\n")
    with pytest.raises(InvalidInputError, match=":3:"):
        read_metrics_csv(str(path))
    bad = tmp_path / "bad.csv"
    bad.write_text("algo,seed,env_steps,mean_return,success_rate\nmamba,0,ten,1.0,0.5\n")
    with pytest.raises(InvalidInputError, match=":2:"):
        plot([str(bad)], str(tmp_path / "plots"))
    with pytest.raises(InvalidInputError):
        plot([], str(tmp_path / "plots"))
