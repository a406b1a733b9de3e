"""Experiment command line: train, evaluate, compare, bound.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig, load_config, with_overrides
from .env import EnvConfig, write_trajectory
from .errors import ConfigError
from .experiment import (
    compare_summary,
    emit_metrics,
    evaluate,
    eval_env_seed,
    load_mbrl_team,
    load_q_team,
    run_episode,
    samples_to_threshold,
    save_artifacts,
    theorem1_ratio,
    train,
    write_summary,
)
from .graph import default_graph
from .inference import write_attention_csv

logger = logging.getLogger("causalmac")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="INI config file path")
    p.add_argument("--seeds", help="comma-separated seed list override")
    p.add_argument("--method", help="method override")
    p.add_argument("--out", default="runs", help="output directory")


def _load(args) -> tuple[EnvConfig, TrainConfig]:
    env_cfg, cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "seeds", None):
        overrides["seeds"] = tuple(int(s) for s in args.seeds.split(","))
    if getattr(args, "method", None):
        overrides["method"] = args.method
    if overrides:
        cfg = with_overrides(cfg, **overrides)
    return env_cfg, cfg


def _emit_traces(result, out: Path, env_cfg: EnvConfig):
    out.mkdir(parents=True, exist_ok=True)
    for seed, trace in result.traces.items():
        emit_metrics(trace.records, out / f"metrics_{result.method}_seed{seed}.csv")
    emit_metrics(result.averaged_trace(), out / f"metrics_{result.method}_avg.csv")


def cmd_train(args) -> int:
    env_cfg, cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "graph.txt").write_text(default_graph(env_cfg).export_text())
    result = None
    try:
        result = train(env_cfg, cfg)
    except KeyboardInterrupt:
        logger.warning("interrupted; flushing whatever completed")
        return 2
    _emit_traces(result, out, env_cfg)
    save_artifacts(result, out)
    avg = result.averaged_trace()
    target = max(r.eval_mean_reward for r in avg)
    steps = samples_to_threshold(avg, 0.95, target, env_cfg.max_steps)
    summary = {
        "method": cfg.method,
        "seeds": list(cfg.seeds),
        "final_eval_mean": avg[-1].eval_mean_reward,
        "total_real_steps": avg[-1].real_env_steps,
        "samples_to_95pct_of_own_best": steps,
    }
    write_summary(summary, out / f"summary_{cfg.method}.json")
    print(f"{cfg.method}: final eval {avg[-1].eval_mean_reward:.3f} after "
          f"{avg[-1].real_env_steps} real steps")
    return 0


def cmd_evaluate(args) -> int:
    env_cfg, cfg = _load(args)
    seeds = list(cfg.seeds)
    team = _team_for_eval(env_cfg, cfg, args, seeds[0])
    mean, std, rewards = evaluate(team, env_cfg, args.episodes, seeds)
    print(f"{cfg.method}: eval mean {mean:.4f} std {std:.4f} over "
          f"{len(rewards)} episodes")
    if args.dump_dir:
        _dump_eval_episode(team, env_cfg, cfg, seeds[0], Path(args.dump_dir),
                           args.checkpoint)
    return 0


def _team_for_eval(env_cfg, cfg, args, seed):
    from .baselines import PredefinedTeam

    if cfg.method == "predefined":
        return PredefinedTeam(env_cfg.num_nodes, env_cfg.buffer_capacity)
    if not args.checkpoint:
        raise ConfigError(f"method {cfg.method!r} needs --checkpoint")
    if cfg.method == "causal-mbrl":
        return load_mbrl_team(env_cfg, cfg, args.checkpoint, seed)
    return load_q_team(env_cfg, cfg, args.checkpoint, seed)


def _dump_eval_episode(team, env_cfg, cfg, seed, dump_dir: Path, checkpoint):
    """Write one greedy episode as a trajectory dump, plus the causal
    model's attention weights over it when a model checkpoint is around."""
    from .inference import CausalWorldModel

    dump_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(0))
    traj, _, _ = run_episode(env_cfg, eval_env_seed(seed, 0), team, rng,
                             greedy=True)
    write_trajectory(traj, dump_dir / "trajectory.jsonl")
    if cfg.method == "causal-mbrl" and checkpoint:
        model = CausalWorldModel(env_cfg, seed=0, l2=cfg.l2, lr=cfg.lr)
        model.store.load(Path(checkpoint) / f"seed{seed}" / "model.npz")
        rows = []
        for tr in traj:
            _, _, r = model.sample_slot(list(tr.state_before["nodes"]),
                                        tr.state_before["gateway"],
                                        list(tr.decisions),
                                        np.random.Generator(np.random.PCG64(0)))
            rows.extend(r)
        write_attention_csv(rows, dump_dir / "attention.csv")


def cmd_compare(args) -> int:
    env_cfg, cfg = _load(args)
    methods = args.methods.split(",")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for method in methods:
        mcfg = with_overrides(cfg, method=method)
        results[method] = train(env_cfg, mcfg)
        _emit_traces(results[method], out, env_cfg)
        save_artifacts(results[method], out)
    summary = compare_summary(results, fraction=args.fraction)
    write_summary(summary, out / "summary.json")
    print(json.dumps(summary["methods"], indent=2))
    if "efficiency_vs_q" in summary:
        print(f"efficiency vs tabular-q: {summary['efficiency_vs_q']:.2%}")
    return 0


def cmd_bound(args) -> int:
    ratio = theorem1_ratio(args.num_vars, args.v_max, args.d_in)
    print(f"improvement ratio V_max^(|V|-d_in)/|V|^2 = {ratio!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causalmac",
        description="Causal model-based MARL for TDMA uplink channel access")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the three-phase training loop")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="greedy evaluation of a policy")
    _add_common(p)
    p.add_argument("--episodes", type=int, default=128)
    p.add_argument("--checkpoint", help="checkpoint directory from train")
    p.add_argument("--dump-dir", help="write trajectory/attention dumps here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="train several methods, compare efficiency")
    _add_common(p)
    p.add_argument("--methods", default="causal-mbrl,tabular-q")
    p.add_argument("--fraction", type=float, default=0.95)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bound", help="evaluate the sample-complexity ratio")
    p.add_argument("--num-vars", type=int, required=True)
    p.add_argument("--v-max", type=int, required=True)
    p.add_argument("--d-in", type=int, required=True)
    p.set_defaults(func=cmd_bound)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
