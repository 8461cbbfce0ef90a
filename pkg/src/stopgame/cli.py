"""Command-line entry point: ``stopgame {run,bestresponse,solve,check,oracle}``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import sys
from pathlib import Path

import numpy as np

from .equilibrium import berk_nash_check, example1_oracle, grid_value_iteration
from .online import run_online
from .optimizer import CemConfig, best_response_dynamics, cem_best_response, write_dynamics_csv
from .rollout import ATTACKER, DEFENDER
from .scenario import ConfigError, ScenarioConfig, run_experiment
from .strategy import StrategyProfile

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
ORACLE_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
ORACLE_RHO = (0.0, 0.5, 1.0)


def _load(args) -> ScenarioConfig:
    cfg = ScenarioConfig.load(args.config) if args.config else ScenarioConfig.default(args.scenario)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    elif args.seed is not None and isinstance(cfg.raw["seeds"], list):
        overrides["seeds"] = len(cfg.raw["seeds"])
    if args.steps is not None:
        overrides["steps"] = args.steps
    return cfg.with_overrides(**overrides) if overrides else cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    cfg = _load(args)
    res = run_experiment(cfg, _out(args), args.threads)
    for seed, err in sorted(res.failed.items()):
        print(f"seed {seed} failed: {err}", file=sys.stderr)
    print(f"wrote {len(res.traces)} trace(s) to {res.out_dir}")
    return EXIT_RUNTIME if res.failed else EXIT_OK


def _cem(args) -> CemConfig:
    return CemConfig(population=args.population, iterations=args.iterations, eval_samples=args.eval_samples,
                     eval_horizon=args.eval_horizon, seed=args.seed or 0)


def cmd_bestresponse(args) -> int:
    cfg = _load(args)
    model = cfg.setup.true_model
    cem = _cem(args)
    out = _out(args)
    if args.rounds:
        init = StrategyProfile(cfg.setup.base_defender, cfg.setup.base_attacker)
        history = best_response_dynamics(model, init, args.rounds, cem)
        write_dynamics_csv(history, out / "dynamics.csv")
        last = history[-1]
        print(f"alpha={last.profile.defender.alpha!r} beta={last.profile.attacker.beta!r} cost={last.cost!r}")
        return EXIT_OK
    opponent = cfg.setup.base_attacker if args.player == DEFENDER else cfg.setup.base_defender
    res = cem_best_response(model, opponent, args.player, cem)
    res.write_csv(out / f"cem_{args.player}.csv")
    print(f"player={args.player} param={res.best_param!r} cost={res.best_cost!r} plateau={res.plateau}")
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = _load(args)
    model = cfg.setup.true_model
    if args.player == DEFENDER:
        vf = grid_value_iteration(model, cfg.setup.base_attacker, DEFENDER, args.grid)
    else:
        vf = grid_value_iteration(model, cfg.setup.base_defender, ATTACKER, args.grid,
                                  belief_attacker=cfg.setup.base_attacker)
    path = _out(args) / f"value_{args.player}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if vf.player == DEFENDER:
            w.writerow(["b1", "value", "q_continue", "q_stop", "action"])
            for i, x in enumerate(vf.grid):
                w.writerow([repr(float(x)), repr(float(vf.values[i])), repr(float(vf.q_values[i, 0])),
                            repr(float(vf.q_values[i, 1])), int(vf.policy[i])])
        else:
            w.writerow(["b1", "value_s0", "value_s1", "action_s0", "action_s1"])
            for i, x in enumerate(vf.grid):
                w.writerow([repr(float(x)), repr(float(vf.values[0, i])), repr(float(vf.values[1, i])),
                            int(vf.policy[0, i]), int(vf.policy[1, i])])
    switches = vf.switches() if vf.player == DEFENDER else [vf.switches(s) for s in range(2)]
    print(f"iterations={vf.iterations} residual={vf.residual!r} switches={switches}")
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = _load(args)
    seed = cfg.seeds[0]
    result = run_online(cfg.setup, seed)
    out = _out(args)
    result.trace.write_csv(out / f"trace_seed{seed}.csv")
    if args.trace is not None and Path(args.trace).read_bytes() != (out / f"trace_seed{seed}.csv").read_bytes():
        print(f"trace {args.trace} does not match a replay of seed {seed}", file=sys.stderr)
        return EXIT_RUNTIME
    window = min(args.window, len(result.trace) - 1)
    report = berk_nash_check(result, cfg.setup, window=window, tolerance=args.tolerance, seed=seed)
    (out / f"check_seed{seed}.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_oracle(args) -> int:
    path = _out(args) / "oracle.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gamma", "p", "q", "rho_a", "jbar_a0", "jbar_a1", "jbar_b0", "jbar_b1", "theta_star", "nu0",
                    "consistent", "exists", "reason"])
        for p, q, rho in itertools.product(ORACLE_GRID, ORACLE_GRID, ORACLE_RHO):
            v = example1_oracle(args.gamma, p, q, rho)
            w.writerow([args.gamma, p, q, rho, *map(repr, map(float, np.concatenate([v.jbar_a, v.jbar_b]))),
                        "".join(sorted(v.theta_star)), "" if v.nu0 is None else repr(v.nu0),
                        int(v.consistent), int(v.exists), v.reason])
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stopgame", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML scenario file (defaults to the built-in scenario)")
    common.add_argument("--scenario", type=int, default=1, help="built-in scenario id when no config is given")
    common.add_argument("--seed", type=int, help="first seed")
    common.add_argument("--seeds", type=int, help="number of consecutive seeds")
    common.add_argument("--steps", type=int, help="episode length override")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="worker processes for seed-level parallelism")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run a scenario over seeds")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bestresponse", parents=[common], help="cross-entropy threshold best response")
    p.add_argument("--player", choices=[DEFENDER, ATTACKER], default=DEFENDER)
    p.add_argument("--rounds", type=int, default=0, help="alternate best responses for this many rounds")
    p.add_argument("--population", type=int, default=100)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--eval-samples", type=int, default=50)
    p.add_argument("--eval-horizon", type=int, default=50)
    p.set_defaults(func=cmd_bestresponse)

    p = sub.add_parser("solve", parents=[common], help="grid value iteration against the base opponent")
    p.add_argument("--player", choices=[DEFENDER, ATTACKER], default=DEFENDER)
    p.add_argument("--grid", type=int, default=201)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("check", parents=[common], help="replay one seed and score the equilibrium conditions")
    p.add_argument("--trace", help="trace CSV that must match the replay byte for byte")
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--tolerance", type=float, default=0.05)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("oracle", parents=[common], help="sweep the two-conjecture analytic example")
    p.add_argument("--gamma", type=float, default=0.9)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
