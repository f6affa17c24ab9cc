"""Experiment runner, exact success-probability oracle, and effort
accounting.

The oracle enumerates the finite attempt tree of one subtask under the
supervision policy — attempt; non-degrading failure retries while the
budget lasts; degrading failure runs the restorer (success retries,
failure escalates); an exhausted budget escalates; escalation grants at
most one human-restored final attempt — and multiplies the per-subtask
absorption probabilities across the plan. No sampling is involved, so
Monte-Carlo runs of the orchestrator can be checked against it exactly.

Effort accounting compares a fully manual baseline (every trajectory
demands a demonstration plus a manual reset) against the agent-run collection
loop (one-time setup, seed demonstrations, and scripted interventions);
ratios are normalized so that this system costs 1.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .canon import canonical_dumps
from .collector import Dataset, ScriptedHuman, collect_pairs
from .agent import ScriptedPlanner
from .errors import DegenerateConfig, SchemaError
from .events import KIND_INTERVENTION, EventLog
from .orchestrator import (
    RESULT_ABORTED,
    TaskPlan,
    TaskResult,
    execute_task,
)
from .policypool import LearningCurve, PolicyPool, PolicySpec
from .rng import episode_rng, mix64
from .simenv import FORWARD, INVERSE, Scenario, SimWorld, initial_state, sample_outcome, scenario_from_dict


# -- exact oracle ------------------------------------------------------------

@dataclass
class SubtaskParams:
    """One subtask's attempt-chain parameters."""

    success_prob: float
    nondegrading_fraction: float
    recovery_success: float | None
    max_attempts: int
    human_retry: bool

    def validate(self) -> None:
        probs = [self.success_prob, self.nondegrading_fraction]
        if self.recovery_success is not None:
            probs.append(self.recovery_success)
        if any(not 0.0 <= x <= 1.0 for x in probs):
            raise SchemaError("probabilities must lie in [0,1]")
        if self.max_attempts < 1:
            raise SchemaError("max_attempts must be at least 1")


@dataclass
class ChainParams:
    subtasks: list[SubtaskParams]

    @classmethod
    def from_dict(cls, d: dict) -> "ChainParams":
        subtasks = []
        for raw in d["subtasks"]:
            sub = SubtaskParams(
                success_prob=raw["success_prob"],
                nondegrading_fraction=raw["nondegrading_fraction"],
                recovery_success=raw.get("recovery_success"),
                max_attempts=raw.get("max_attempts", 3),
                human_retry=raw.get("human_retry", False),
            )
            sub.validate()
            subtasks.append(sub)
        if not subtasks:
            raise SchemaError("chain declares no subtasks")
        return cls(subtasks)


def load_chain(path: str) -> ChainParams:
    try:
        with open(path, encoding="utf-8") as f:
            return ChainParams.from_dict(json.load(f))
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise SchemaError(f"cannot load chain params {path}: {exc}") from exc


def subtask_success(params: SubtaskParams) -> float:
    """Absorption probability of one subtask's attempt tree, exactly."""
    params.validate()
    p = params.success_prob
    beta = params.nondegrading_fraction
    r = params.recovery_success
    budget = params.max_attempts
    human_term = p if params.human_retry else 0.0

    def from_attempt(used: int) -> float:
        # Probability of eventual success given `used` attempts consumed
        # and the scene in the precondition region.
        prob = p
        nd = (1.0 - p) * beta
        dg = (1.0 - p) * (1.0 - beta)
        if used + 1 < budget:
            cont = from_attempt(used + 1)
            prob += nd * cont
            if r is not None:
                prob += dg * (r * cont + (1.0 - r) * human_term)
            else:
                prob += dg * human_term
        else:
            prob += (nd + dg) * human_term
        return prob

    return from_attempt(0)


def markov_success(chain: ChainParams) -> float:
    """Exact task success probability: product across the subtask chain."""
    result = 1.0
    for sub in chain.subtasks:
        result *= subtask_success(sub)
    return result


# -- chain-parameterized simulation setups -----------------------------------

def make_chain_setup(chain: ChainParams) -> tuple[Scenario, list[PolicySpec], TaskPlan, dict[str, bool]]:
    """Synthetic scenario + constant-rate skills realizing a ChainParams
    chain, for oracle-vs-simulation comparisons."""
    subtask_dicts = []
    outcome_params = {}
    objects = []
    specs: list[PolicySpec] = []
    budgets: dict[str, int] = {}
    human_map: dict[str, bool] = {}
    for k, sub in enumerate(chain.subtasks, start=1):
        sid = f"step_{k}"
        obj = f"item_{k}"
        objects.append(obj)
        subtask_dicts.append(
            {
                "subtask_id": sid,
                "object_id": obj,
                "forward_text": f"advance stage {k}",
                "inverse_text": f"restore stage {k}",
                "goal_predicate": {"objects": {obj: ["AtGoal"]}},
                "precondition_predicate": {"objects": {obj: ["AtStart"]}},
                "degrade_targets": ["Tipped"],
            }
        )
        outcome_params[sid] = {"nondegrading_fraction": sub.nondegrading_fraction}
        specs.append(
            PolicySpec(f"{sid}_forward", sid, FORWARD, LearningCurve([(0, sub.success_prob)]))
        )
        if sub.recovery_success is not None:
            specs.append(
                PolicySpec(f"{sid}_inverse", sid, INVERSE, LearningCurve([(0, sub.recovery_success)]))
            )
        budgets[sid] = sub.max_attempts
        human_map[sid] = sub.human_retry
    scenario = scenario_from_dict(
        {
            "name": "chain",
            "objects": objects,
            "drawer_default": "Open",
            "spill_default": "None",
            "subtasks": subtask_dicts,
            "outcome_params": outcome_params,
        }
    )
    plan = TaskPlan(subtask_ids=[f"step_{k}" for k in range(1, len(chain.subtasks) + 1)], max_attempts=budgets)
    return scenario, specs, plan, human_map


# -- Monte-Carlo deployment ---------------------------------------------------

def _episode_setup(scenario, specs, plan, orchestrated, human_retry):
    """Per-configuration pieces reusable across episodes: the scripted
    planner is a pure function of (memory, obs), so one instance serves
    every episode of a configuration."""
    if orchestrated:
        template_pool = PolicyPool(specs)
        planner = ScriptedPlanner(scenario, template_pool, plan.max_attempts, plan.recovery_map, allow_recovery=True)
        wants_human = any(human_retry.values()) if isinstance(human_retry, dict) else bool(human_retry)
        human = ScriptedHuman() if wants_human else None
        return planner, plan, human
    baseline_plan = TaskPlan(list(plan.subtask_ids), max_attempts=1, recovery_map={})
    planner = ScriptedPlanner(scenario, PolicyPool(specs), 1, {}, allow_recovery=False)
    return planner, baseline_plan, None


def run_deploy_episode(
    scenario: Scenario,
    specs: list[PolicySpec],
    plan: TaskPlan,
    counts: dict[str, int],
    master_seed: int,
    episode: int,
    orchestrated: bool,
    human_retry: bool | dict[str, bool] = True,
) -> tuple[TaskResult, EventLog]:
    """One seeded deployment episode, orchestrated or open-loop baseline.

    The baseline disables everything the supervisor adds: one attempt
    per subtask, no restorer, no human.
    """
    planner, run_plan, human = _episode_setup(scenario, specs, plan, orchestrated, human_retry)
    world = SimWorld(scenario, episode_rng(master_seed, episode), episode)
    pool = PolicyPool(specs, initial_counts=dict(counts))
    if orchestrated:
        return execute_task(planner, world, pool, run_plan, human=human, human_retry=human_retry)
    return execute_task(planner, world, pool, run_plan, human=None)


def _mc_chunk(payload) -> dict:
    scenario, specs, plan, counts, master_seed, start, stop, orchestrated, human_retry = payload
    planner, run_plan, human = _episode_setup(scenario, specs, plan, orchestrated, human_retry)
    stats = {"episodes": 0, "successes": 0, "aborted": 0, "with_human": 0, "interventions": 0, "wall_ticks": 0}
    for episode in range(start, stop):
        world = SimWorld(scenario, episode_rng(master_seed, episode), episode)
        pool = PolicyPool(specs, initial_counts=dict(counts))
        result, _ = execute_task(
            planner, world, pool, run_plan,
            human=human if orchestrated else None,
            human_retry=human_retry if orchestrated else False,
        )
        stats["episodes"] += 1
        if result.status == RESULT_ABORTED:
            stats["aborted"] += 1
        else:
            stats["successes"] += 1
            if result.interventions > 0:
                stats["with_human"] += 1
        stats["interventions"] += result.interventions
        stats["wall_ticks"] += result.wall_ticks
    return stats


def deploy_monte_carlo(
    scenario: Scenario,
    specs: list[PolicySpec],
    plan: TaskPlan,
    counts: dict[str, int],
    episodes: int,
    master_seed: int,
    orchestrated: bool,
    human_retry: bool | dict[str, bool] = True,
    workers: int = 1,
) -> dict:
    """Seeded Monte-Carlo over independent episodes. Per-episode streams
    are derived from (master_seed, episode index), and the reduction is
    a commutative sum, so results are identical at every worker count."""
    bounds = [0, episodes] if workers <= 1 else list(range(0, episodes, max(1, episodes // workers))) + [episodes]
    chunks = [
        (scenario, specs, plan, counts, master_seed, lo, hi, orchestrated, human_retry)
        for lo, hi in zip(bounds, bounds[1:])
        if hi > lo
    ]
    if workers <= 1:
        parts = [_mc_chunk(c) for c in chunks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_mc_chunk, chunks))
    total = {"episodes": 0, "successes": 0, "aborted": 0, "with_human": 0, "interventions": 0, "wall_ticks": 0}
    for part in parts:
        for key in total:
            total[key] += part[key]
    total["success_rate"] = total["successes"] / episodes if episodes else 0.0
    return total


def single_attempt_rate(
    scenario: Scenario, spec: PolicySpec, n: int, episodes: int, master_seed: int
) -> float:
    """Empirical single-attempt success frequency at trajectory count n."""
    sub = scenario.subtask(spec.subtask_id)
    rate = spec.curve.rate_at(n)
    state = initial_state(scenario)
    if spec.direction != FORWARD:
        # Inverse skills run from the forward goal configuration.
        goal = sub.goal_predicate
        for obj, allowed in goal.get("objects", {}).items():
            state.objects[obj] = allowed[0]
        if "drawer" in goal:
            state.drawer = goal["drawer"][0]
        if "spill" in goal:
            state.spill = goal["spill"][0]
    hits = 0
    for episode in range(episodes):
        rng = episode_rng(master_seed, episode)
        outcome = sample_outcome(state, sub, rate, sub.nondegrading_fraction, rng, spec.direction)
        hits += 1 if outcome.success else 0
    return hits / episodes


# -- human-effort accounting ---------------------------------------------------

@dataclass
class CostConfig:
    """Calibration constants for the effort comparison, in demo-time
    units. Fitted once against the statistics of the seeded reference
    collection run and committed with the fixtures."""

    t_demo: float
    t_manual_reset: float
    t_intervention: float
    t_setup: float
    interventions_per_manual_trajectory: float = 2.0

    def validate(self) -> None:
        values = [self.t_demo, self.t_manual_reset, self.t_intervention, self.t_setup]
        if any(v < 0 for v in values) or self.interventions_per_manual_trajectory <= 0:
            raise SchemaError("cost constants must be non-negative")


def load_costs(path: str) -> CostConfig:
    try:
        with open(path, encoding="utf-8") as f:
            config = CostConfig(**json.load(f))
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise SchemaError(f"cannot load cost config {path}: {exc}") from exc
    config.validate()
    return config


def effort_accounting(
    event_logs: list[EventLog], costs: CostConfig, n_trajectories: int, seed_demos: int
) -> tuple[float, float]:
    """(human_time_ratio, intervention_ratio), manual baseline over ours.

    Manual collection of the same n trajectories costs a demonstration
    plus a manual reset each; ours costs one-time setup, the seed
    demonstrations, and the logged interventions.
    """
    costs.validate()
    interventions = sum(log.count(KIND_INTERVENTION) for log in event_logs)
    ours_time = costs.t_setup + seed_demos * costs.t_demo + interventions * costs.t_intervention
    if interventions == 0 or ours_time == 0:
        raise DegenerateConfig("effort ratio denominator is zero")
    manual_time = n_trajectories * (costs.t_demo + costs.t_manual_reset)
    time_ratio = manual_time / ours_time
    intervention_ratio = (n_trajectories * costs.interventions_per_manual_trajectory) / interventions
    return time_ratio, intervention_ratio


def collection_run(
    scenario: Scenario,
    specs: list[PolicySpec],
    subtask_ids: list[str],
    pairs_per_subtask: int,
    counts: dict[str, int],
    master_seed: int,
    budget_per_subtask: int,
) -> dict:
    """Reference collection run for the effort metrics: one independent
    self-resetting loop per subtask."""
    logs: list[EventLog] = []
    n_success = 0
    pairs = 0
    for index, sid in enumerate(subtask_ids):
        world = SimWorld(scenario, episode_rng(master_seed, index), episode=index)
        pool = PolicyPool(specs, initial_counts=dict(counts))
        planner = ScriptedPlanner(scenario, pool)
        dataset = Dataset()
        got, log = collect_pairs(
            planner, world, pool, sid, pairs_per_subtask, budget_per_subtask, dataset=dataset
        )
        logs.append(log)
        pairs += len(got)
        n_success += sum(dataset.policy_counts.values())
    return {
        "event_logs": logs,
        "pairs": pairs,
        "n_trajectories": n_success,
        "interventions": sum(log.count(KIND_INTERVENTION) for log in logs),
    }


# -- experiment report ---------------------------------------------------------

@dataclass
class MetricsReport:
    seed: int
    iterations: list[dict]
    cells: list[dict]
    long_horizon: dict
    human_time_ratio: float
    intervention_ratio: float
    effort: dict
    normalization: str = "ours=1"

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "iterations": self.iterations,
            "cells": self.cells,
            "long_horizon": self.long_horizon,
            "human_time_ratio": self.human_time_ratio,
            "intervention_ratio": self.intervention_ratio,
            "effort": self.effort,
            "normalization": self.normalization,
        }

    def to_bytes(self) -> bytes:
        return canonical_dumps(self.to_dict()).encode("ascii") + b"\n"


def chain_from_policies(
    scenario: Scenario,
    specs: list[PolicySpec],
    plan: TaskPlan,
    n: int,
    orchestrated: bool,
    human_retry: bool = True,
) -> ChainParams:
    """Chain parameters matching a deploy configuration at trajectory
    count n, for oracle cross-checks."""
    by_role = {(s.subtask_id, s.direction): s for s in specs}
    subtasks = []
    for sid in plan.subtask_ids:
        forward = by_role[(sid, FORWARD)]
        inverse = by_role.get((sid, INVERSE))
        beta = scenario.subtask(sid).nondegrading_fraction
        if orchestrated:
            subtasks.append(
                SubtaskParams(
                    success_prob=forward.curve.rate_at(n),
                    nondegrading_fraction=beta,
                    recovery_success=inverse.curve.rate_at(0) if inverse else None,
                    max_attempts=plan.budget(sid),
                    human_retry=human_retry,
                )
            )
        else:
            subtasks.append(
                SubtaskParams(
                    success_prob=forward.curve.rate_at(n),
                    nondegrading_fraction=beta,
                    recovery_success=None,
                    max_attempts=1,
                    human_retry=False,
                )
            )
    return ChainParams(subtasks)


def run_experiment(config: dict, seed: int, out_dir: str | None = None, workers: int = 1, plot: bool = False) -> MetricsReport:
    """Execute the full experiment grid described by a config dict (see
    fixtures/experiment.json) and write the report artifacts."""
    scenario = _load_scenario_ref(config["scenario"])
    specs = _load_policy_ref(config["policies"])
    plan = _load_plan_ref(config["plan"])
    iterations = config.get("iterations", [1, 2, 3, 4, 5])
    deploy_episodes = config.get("deploy_episodes", 2000)
    cell_episodes = config.get("cell_episodes", 1000)
    samples_per_iteration = config.get("samples_per_iteration", 50)
    forward_ids = [s.policy_id for s in specs if s.direction == FORWARD]

    iteration_rows = []
    for i in iterations:
        n = samples_per_iteration * i
        counts = {pid: n for pid in forward_ids}
        orchestrated = deploy_monte_carlo(
            scenario, specs, plan, counts, deploy_episodes, mix64(seed, 100 + i), orchestrated=True, workers=workers
        )
        baseline = deploy_monte_carlo(
            scenario, specs, plan, counts, deploy_episodes, mix64(seed, 200 + i), orchestrated=False, workers=workers
        )
        iteration_rows.append(
            {
                "iteration": i,
                "n_per_policy": n,
                "orchestrated": {"success_rate": orchestrated["success_rate"], "episodes": deploy_episodes,
                                 "interventions": orchestrated["interventions"]},
                "product_baseline": {"success_rate": baseline["success_rate"], "episodes": deploy_episodes},
                "exact": {
                    "orchestrated": markov_success(chain_from_policies(scenario, specs, plan, n, True)),
                    "product_baseline": markov_success(chain_from_policies(scenario, specs, plan, n, False)),
                },
            }
        )

    cells = []
    cell_index = 0
    for i in iterations:
        n = samples_per_iteration * i
        for spec in specs:
            if spec.direction != FORWARD:
                continue
            empirical = single_attempt_rate(
                scenario, spec, n, cell_episodes, mix64(mix64(seed, 300), cell_index)
            )
            cells.append(
                {
                    "iteration": i,
                    "subtask_id": spec.subtask_id,
                    "n": n,
                    "curve_rate": spec.curve.rate_at(n),
                    "empirical_rate": empirical,
                    "episodes": cell_episodes,
                }
            )
            cell_index += 1

    effort_cfg = config.get("effort", {})
    effort_iteration = effort_cfg.get("iteration", 5)
    pairs_per_subtask = effort_cfg.get("pairs_per_subtask", 250)
    seed_demos_per_policy = effort_cfg.get("seed_demos_per_policy", samples_per_iteration)
    budget = effort_cfg.get("budget_per_subtask", max(200 * pairs_per_subtask, 1000))
    costs = _load_costs_ref(effort_cfg.get("costs", "costs_calibration.json"))
    counts = {pid: samples_per_iteration * effort_iteration for pid in forward_ids}
    run = collection_run(
        scenario, specs, plan.subtask_ids, pairs_per_subtask, counts, mix64(seed, 400), budget
    )
    seed_demos = seed_demos_per_policy * len(forward_ids)
    time_ratio, intervention_ratio = effort_accounting(
        run["event_logs"], costs, run["n_trajectories"], seed_demos
    )

    last = iteration_rows[-1]
    long_horizon = {
        "iteration": last["iteration"],
        "orchestrated": last["orchestrated"]["success_rate"],
        "product_baseline": last["product_baseline"]["success_rate"],
        "gap": last["orchestrated"]["success_rate"] - last["product_baseline"]["success_rate"],
        "exact_orchestrated": last["exact"]["orchestrated"],
        "exact_product_baseline": last["exact"]["product_baseline"],
    }
    report = MetricsReport(
        seed=seed,
        iterations=iteration_rows,
        cells=cells,
        long_horizon=long_horizon,
        human_time_ratio=time_ratio,
        intervention_ratio=intervention_ratio,
        effort={
            "pairs": run["pairs"],
            "n_trajectories": run["n_trajectories"],
            "interventions": run["interventions"],
            "seed_demos": seed_demos,
        },
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "wb") as f:
            f.write(report.to_bytes())
        with open(os.path.join(out_dir, "table.txt"), "w", encoding="ascii") as f:
            f.write(render_table(report))
        if plot:
            write_svg(report, os.path.join(out_dir, "curves.svg"))
    return report


def _load_scenario_ref(ref: str) -> Scenario:
    from .cli import resolve_fixture
    from .simenv import load_scenario

    return load_scenario(resolve_fixture(ref))


def _load_policy_ref(ref: str) -> list[PolicySpec]:
    from .cli import resolve_fixture
    from .policypool import load_policies

    return load_policies(resolve_fixture(ref))


def _load_plan_ref(ref: str) -> TaskPlan:
    from .cli import resolve_fixture
    from .orchestrator import load_plan

    return load_plan(resolve_fixture(ref))


def _load_costs_ref(ref: str) -> CostConfig:
    from .cli import resolve_fixture

    return load_costs(resolve_fixture(ref))


def render_table(report: MetricsReport) -> str:
    """Plain-text iteration-by-subtask success table plus the headline
    comparisons."""
    subtask_ids = sorted({c["subtask_id"] for c in report.cells})
    lines = ["Single-attempt success rates (empirical / curve)"]
    header = "iteration  " + "  ".join(f"{sid:>18s}" for sid in subtask_ids)
    lines.append(header)
    by_key = {(c["iteration"], c["subtask_id"]): c for c in report.cells}
    iterations = sorted({c["iteration"] for c in report.cells})
    for i in iterations:
        fields = []
        for sid in subtask_ids:
            cell = by_key[(i, sid)]
            fields.append(f"{cell['empirical_rate']:.3f} / {cell['curve_rate']:.3f}".rjust(18))
        lines.append(f"{i:>9d}  " + "  ".join(fields))
    lines.append("")
    lines.append("Long-horizon success by iteration (orchestrated vs product baseline)")
    for row in report.iterations:
        lines.append(
            f"  iteration {row['iteration']}: orchestrated {row['orchestrated']['success_rate']:.4f} "
            f"(exact {row['exact']['orchestrated']:.4f})  "
            f"product {row['product_baseline']['success_rate']:.4f} "
            f"(exact {row['exact']['product_baseline']:.4f})"
        )
    lines.append("")
    lines.append(
        f"Human effort, manual baseline over ours ({report.normalization}): "
        f"time {report.human_time_ratio:.2f}x, interventions {report.intervention_ratio:.2f}x"
    )
    return "\n".join(lines) + "\n"


def write_svg(report: MetricsReport, path: str) -> None:
    """Minimal line chart of success rate across iterations."""
    width, height, margin = 480, 320, 40
    xs = [row["iteration"] for row in report.iterations]
    if not xs:
        return
    x0, x1 = min(xs), max(xs)
    span = (x1 - x0) or 1

    def px(x: float) -> float:
        return margin + (x - x0) / span * (width - 2 * margin)

    def py(y: float) -> float:
        return height - margin - y * (height - 2 * margin)

    def polyline(points: list[tuple[float, float]], color: str) -> str:
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in points)
        return f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>'

    orchestrated = [(row["iteration"], row["orchestrated"]["success_rate"]) for row in report.iterations]
    product = [(row["iteration"], row["product_baseline"]["success_rate"]) for row in report.iterations]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        polyline(orchestrated, "#1f77b4"),
        polyline(product, "#d62728"),
        f'<text x="{margin}" y="{margin - 10}" font-size="12">success rate across iterations '
        f"(blue: orchestrated, red: product baseline)</text>",
        "</svg>",
    ]
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(parts) + "\n")
