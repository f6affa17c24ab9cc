"""Command-line entry points: collect, deploy, oracle, report, serve.

File arguments resolve against the working directory first and fall back
to the packaged fixtures, so ``--scenario vanity.json`` works out of the
box.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .canon import canonical_dumps
from .errors import BudgetExceeded, SchemaError, SkillcycleError


def resolve_fixture(ref: str) -> str:
    if os.path.exists(ref):
        return ref
    packaged = os.path.join(os.path.dirname(__file__), "fixtures", ref)
    if os.path.exists(packaged):
        return packaged
    raise SchemaError(f"cannot resolve file: {ref}")


def _cmd_collect(args) -> int:
    from .agent import ScriptedPlanner
    from .collector import Dataset, ScriptedHuman, collect_pairs
    from .policypool import PolicyPool, load_policies
    from .rng import episode_rng
    from .simenv import FORWARD, SimWorld, load_scenario

    scenario = load_scenario(resolve_fixture(args.scenario))
    specs = load_policies(resolve_fixture(args.policies))
    pool = PolicyPool(specs)
    pool.set_all_counts(args.samples_per_iteration * args.iteration, FORWARD)
    world = SimWorld(scenario, episode_rng(args.seed, 0))
    dataset = Dataset(args.out)
    planner = ScriptedPlanner(scenario, pool)
    budget = args.budget if args.budget > 0 else 200 * args.pairs
    try:
        pairs, log = collect_pairs(
            planner, world, pool, args.subtask, args.pairs, budget,
            dataset=dataset, human=ScriptedHuman(),
        )
    except BudgetExceeded as exc:
        print(f"budget exhausted: {exc}", file=sys.stderr)
        return 1
    finally:
        dataset.close()
    if args.log:
        log.write(args.log)
    interventions = sum(1 for e in log if e.kind == "Intervention")
    print(
        canonical_dumps(
            {
                "pairs": len(pairs),
                "records": dataset.record_count,
                "interventions": interventions,
                "out": args.out,
                "seed": args.seed,
            }
        )
    )
    return 0


def _cmd_deploy(args) -> int:
    from .harness import deploy_monte_carlo
    from .orchestrator import load_plan
    from .policypool import load_policies
    from .simenv import FORWARD, load_scenario

    scenario = load_scenario(resolve_fixture(args.scenario))
    specs = load_policies(resolve_fixture(args.policies))
    plan = load_plan(resolve_fixture(args.plan))
    n = args.samples_per_iteration * args.iteration
    counts = {s.policy_id: n for s in specs if s.direction == FORWARD}
    stats = deploy_monte_carlo(
        scenario, specs, plan, counts, args.episodes, args.seed,
        orchestrated=not args.baseline, workers=args.workers,
    )
    payload = {
        "scenario": scenario.name,
        "iteration": args.iteration,
        "n_per_policy": n,
        "baseline": args.baseline,
        "seed": args.seed,
        **stats,
    }
    out = canonical_dumps(payload)
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w", encoding="ascii") as f:
            f.write(out + "\n")
    print(out)
    return 0


def _cmd_oracle(args) -> int:
    from .harness import load_chain, markov_success, subtask_success

    chain = load_chain(resolve_fixture(args.params))
    per_subtask = [subtask_success(sub) for sub in chain.subtasks]
    print(
        canonical_dumps(
            {
                "subtask_success": per_subtask,
                "task_success": markov_success(chain),
            }
        )
    )
    return 0


def _cmd_report(args) -> int:
    from .harness import run_experiment

    with open(resolve_fixture(args.config), encoding="utf-8") as f:
        config = json.load(f)
    report = run_experiment(config, args.seed, out_dir=args.out, workers=args.workers, plot=args.plot)
    print(f"report written to {args.out}")
    print(
        f"long-horizon: orchestrated {report.long_horizon['orchestrated']:.4f} "
        f"vs product {report.long_horizon['product_baseline']:.4f}; "
        f"effort ratios time {report.human_time_ratio:.2f}x, "
        f"interventions {report.intervention_ratio:.2f}x"
    )
    return 0


def _cmd_serve(args) -> int:
    from .collector import Dataset, ScriptedHuman
    from .policypool import PolicyPool, load_policies
    from .rng import episode_rng
    from .simenv import SimWorld, load_scenario
    from .toolbus import build_standard_registry, serve_stdio

    scenario = load_scenario(resolve_fixture(args.scenario))
    specs = load_policies(resolve_fixture(args.policies))
    pool = PolicyPool(specs)
    world = SimWorld(scenario, episode_rng(args.seed, 0))
    dataset = Dataset(args.out) if args.out else Dataset()
    registry = build_standard_registry(world, pool, dataset, ScriptedHuman())
    handled = serve_stdio(registry)
    print(f"served {handled} requests", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skillcycle")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="run the self-resetting collection loop")
    p.add_argument("--scenario", required=True)
    p.add_argument("--subtask", required=True)
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--policies", default="vanity_policies.json")
    p.add_argument("--iteration", type=int, default=1)
    p.add_argument("--samples-per-iteration", type=int, default=50)
    p.add_argument("--budget", type=int, default=0, help="attempt budget (0 = 200 per pair)")
    p.add_argument("--log", default=None, help="also write the event log here")
    p.set_defaults(func=_cmd_collect)

    p = sub.add_parser("deploy", help="Monte-Carlo long-horizon deployment")
    p.add_argument("--scenario", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--policies", required=True)
    p.add_argument("--iteration", type=int, default=5)
    p.add_argument("--samples-per-iteration", type=int, default=50)
    p.add_argument("--episodes", type=int, default=10000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default=None)
    p.add_argument("--baseline", action="store_true", help="open-loop product baseline (no retries)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_deploy)

    p = sub.add_parser("oracle", help="exact success probability for chain params")
    p.add_argument("--params", required=True)
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("report", help="full experiment grid and report")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plot", action="store_true", help="also write an SVG chart")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("serve", help="serve the tool bus over stdio")
    p.add_argument("--scenario", required=True)
    p.add_argument("--policies", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default=None, help="dataset path for append_trajectory")
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SkillcycleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
