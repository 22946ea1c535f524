"""
Command-line surface.

    python cli.py train --env minirail --agents 2 --algo mamba --seed 0 --steps 50000
    python cli.py train --resume runs/minirail-mamba-s0/checkpoint.bin
    python cli.py evaluate --checkpoint runs/minirail-mamba-s0/checkpoint.bin --mode decentralized
    python cli.py plot runs/*/metrics.csv --out plots
    python cli.py dump-messages runs/bus.log
    python cli.py harness --checkpoint runs/minirail-mamba-s0/checkpoint.bin --seeds 100 --episode-steps 50
    python cli.py serve --port 8000
"""
import argparse
import sys
from typing import Dict, List, Optional

from communication import MessageCodec, format_message
from core import Algo, EvalMode, MambaError, RngStream, load_config
from envs import make_env
from exec_runtime import MessageBus, build_bundle, equivalence_harness, load_bundle, make_runtimes, read_bus_log, \
    run_decentralized
from trainer import Trainer, evaluate, plot


def _config_overrides(args: argparse.Namespace) -> Dict:
    overrides = {
        "env": args.env,
        "n_agents": args.agents,
        "algo": args.algo,
        "seed": args.seed,
        "total_steps": args.steps,
        "comm_dropout": args.dropout,
    }
    if args.no_info_loss:
        overrides["use_info_loss"] = False
    if args.no_kl_balancing:
        overrides["use_kl_balancing"] = False
    if args.no_pos_enc:
        overrides["use_positional_encoding"] = False
    if args.linear_comm:
        overrides["use_linear_comm"] = True
    if args.locality is not None:
        overrides["locality_radius"] = args.locality
    return overrides


def cmd_train(args: argparse.Namespace) -> int:
    if args.resume:
        overrides = {"total_steps": args.steps} if args.steps is not None else {}
        trainer = Trainer.resume(args.resume, args.out, dump_dreams=args.dump_dreams or None, **overrides)
        history = trainer.run()
    else:
        config = load_config(args.config, **_config_overrides(args))
        trainer = Trainer(config, args.out, dump_dreams=args.dump_dreams)
        history = trainer.run()
    last = history[-1]
    print(f"✅ finished at {last.env_steps} env steps; metrics in {trainer.metrics_path}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    row = evaluate(args.checkpoint, episodes=args.episodes, mode=args.mode, seed=args.seed)
    if args.json:
        print(row.model_dump_json(indent=2))
    elif row.note:
        print(f"⚠️ {row.note}")
    else:
        print(f"📊 {row.algo} {args.mode}: return {row.mean_return:.3f} ± {row.return_std:.3f}, "
              f"success {row.success_rate:.3f} ± {row.success_std:.3f}, "
              f"{row.bits_transmitted:.0f} payload bits per episode")
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    for path in plot(args.csv, args.out):
        print(f"💾 {path}")
    return 0


def cmd_dump_messages(args: argparse.Namespace) -> int:
    codec = MessageCodec(args.groups, args.classes)
    for message in read_bus_log(args.log, codec):
        print(format_message(message, codec))
    return 0


def cmd_record(args: argparse.Namespace) -> int:
    """One decentralized episode with the bus traffic written to a binary log"""
    bundle, _ = load_bundle(args.checkpoint)
    env = make_env(bundle.config)
    bus = MessageBus(env.n_agents, MessageCodec.from_config(bundle.config), log_path=args.log)
    try:
        result = run_decentralized(env, make_runtimes(bundle, RngStream(args.seed, "execution"), greedy=True),
                                   bus, args.seed, args.max_steps, bundle.config)
    finally:
        bus.close()
    ledger = result.ledger
    print(f"💾 {ledger.frames} frames, {ledger.alive_payload_bits} payload bits, {ledger.summary_bytes} summary bytes "
          f"-> {args.log}")
    return 0


def cmd_harness(args: argparse.Namespace) -> int:
    if args.checkpoint:
        bundle, _ = load_bundle(args.checkpoint)
    else:
        bundle = build_bundle(load_config(args.config, **_config_overrides(args)))
    env = make_env(bundle.config)
    failures = 0
    for seed in range(args.first_seed, args.first_seed + args.seeds):
        report = equivalence_harness(bundle, env, seed, args.episode_steps)
        if not report.equivalent:
            failures += 1
            print(f"❌ seed {seed}: {report.divergence.model_dump_json()}")
    status = "✅" if failures == 0 else "❌"
    print(f"{status} {args.seeds - failures}/{args.seeds} seeds equivalent")
    return 0 if failures == 0 else 1


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn
    uvicorn.run("main:app", host=args.host, port=args.port)
    return 0


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--env", choices=["minirail", "skirmish"])
    parser.add_argument("--agents", type=int)
    parser.add_argument("--algo", choices=[a.value for a in Algo])
    parser.add_argument("--seed", type=int)
    parser.add_argument("--steps", type=int, help="total real environment steps")
    parser.add_argument("--no-info-loss", action="store_true")
    parser.add_argument("--no-kl-balancing", action="store_true")
    parser.add_argument("--dropout", type=float, help="communication-block dropout")
    parser.add_argument("--no-pos-enc", action="store_true")
    parser.add_argument("--linear-comm", action="store_true")
    parser.add_argument("--locality", help="neighbour radius, or 'none'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mamba", description="Multi-agent model-based RL with discrete messages")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    _add_run_options(p)
    p.add_argument("--out", help="run directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--dump-dreams", action="store_true", help="write dreamed trajectories as JSON lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="greedy evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=[m.value for m in EvalMode], default=EvalMode.CENTRAL.value)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="return and success curves from metrics CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", default="plots")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("dump-messages", help="decode a binary bus log")
    p.add_argument("log")
    p.add_argument("--groups", type=int, default=32)
    p.add_argument("--classes", type=int, default=32)
    p.set_defaults(func=cmd_dump_messages)

    p = sub.add_parser("record", help="run one decentralized episode and log its bus traffic")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("harness", help="centralized vs decentralized equivalence sweep")
    _add_run_options(p)
    p.add_argument("--checkpoint")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--episode-steps", type=int, default=50)
    p.set_defaults(func=cmd_harness)

    p = sub.add_parser("serve", help="start the inspection API")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MambaError as e:
        print(f"❌ {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
