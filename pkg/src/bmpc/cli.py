"""Command-line entry points: train, eval, plan, diag."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .harness import RunConfig, config_from_kv, evaluate, load_config_file, train
from .planner import Planner, PlannerConfig, delta_q
from .world_model import load_checkpoint


def _build_config(args) -> RunConfig:
    kv = load_config_file(args.config) if args.config else {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        if not _:
            raise ValueError(f"--set expects key=value, got {item!r}")
        kv[key.strip()] = value.strip()
    cfg = config_from_kv(kv)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def cmd_train(args) -> int:
    cfg = _build_config(args)
    ckpt, summary = train(cfg)
    print(f"checkpoint = {ckpt}")
    for k, v in summary.items():
        print(f"{k} = {v}")
    return 0


def cmd_eval(args) -> int:
    model, _, header = load_checkpoint(args.ckpt)
    env_name = args.env or header.get("env")
    if not env_name:
        raise ValueError("no --env given and checkpoint header carries none")
    report = evaluate(model, env_name, args.episodes, args.policy, PlannerConfig(),
                      seed=args.seed)
    for k, v in report.summary().items():
        if k == "delta_q":
            continue
        print(f"{k} = {v}")
    return 0


def cmd_plan(args) -> int:
    model, _, header = load_checkpoint(args.ckpt)
    text = args.obs if args.obs is not None else sys.stdin.read()
    obs = np.array([float(x) for x in text.split()])
    if obs.size != model.cfg.obs_dim:
        raise ValueError(f"observation has {obs.size} values, model expects {model.cfg.obs_dim}")
    planner = Planner(PlannerConfig(), (model.cfg.log_std_min, model.cfg.log_std_max))
    z = model.encode(obs[None, :])
    result = planner.plan(model, z, seed=args.seed)
    for h in range(result.dist.mu.shape[0]):
        print(f"mu.{h} = " + " ".join(f"{x:.6f}" for x in result.dist.mu[h]))
    for h in range(result.dist.sigma.shape[0]):
        print(f"sigma.{h} = " + " ".join(f"{x:.6f}" for x in result.dist.sigma[h]))
    print(f"q_hat = {result.value:.6f}")
    print(f"delta_q = {delta_q(result):.6f}")
    return 0


def cmd_diag(args) -> int:
    rows = []
    with open(args.metrics) as f:
        for line in f:
            event = json.loads(line)
            if event.get("kind") == "eval" and "delta_q_mean" in event:
                rows.append(event)
    if not rows:
        print("no eval events with planner diagnostics found")
        return 0
    header = f"{'step':>10} {'n':>6} {'mean':>10} {'std':>10} {'p10':>10} {'p50':>10} {'p90':>10}"
    print(header)
    print("-" * len(header))
    for e in rows:
        n = len(e.get("delta_q", []))
        print(f"{e['step']:>10} {n:>6} {e['delta_q_mean']:>10.4f} {e['delta_q_std']:>10.4f} "
              f"{e['delta_q_p10']:>10.4f} {e['delta_q_p50']:>10.4f} {e['delta_q_p90']:>10.4f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bmpc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--env", default=None)
    p.add_argument("--policy", choices=["mpc", "network", "both"], default="both")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plan", help="plan from one observation and print the distribution")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--obs", default=None, help="whitespace-separated values (default: stdin)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("diag", help="summarize planner value-improvement diagnostics")
    p.add_argument("--metrics", required=True)
    p.set_defaults(func=cmd_diag)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # CLI contract: nonzero exit with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
