"""Oracle, regret and violation metrics, trial orchestration, output files, CLI."""

from __future__ import annotations

import argparse
import csv
from dataclasses import dataclass
import io
import json
from pathlib import Path
import sys
import time

import numpy as np

from .dr_scenario import DRScenario, ScenarioError, load_scenario
from .response import Environment
from .safety import ConfigurationError, ConstraintSet, PriceGrid, candidate_loads, initial_safe_points
from .spr_policy import LogUtility, SprConfig, run_spr
from .sum_policy import SumConfig, run_sum, utility_batch
from .trace import ExperimentTrace

ALGORITHMS = ("spr", "sum")


# ---------------------------------------------------------------------------
# true values and the grid oracle


def spr_utilities(b) -> list[LogUtility]:
    return [LogUtility(float(w)) for w in b]


def true_option_means(env: Environment, grid: PriceGrid) -> np.ndarray:
    """(n, O, V) noiseless consumption of every user at every option of its group."""
    cache: dict = {}
    out = []
    for model in env.models:
        key = (id(model.basis), model.theta_true.tobytes())
        if key not in cache:
            cache[key] = model.basis.batch(grid.options) @ model.theta_true
        out.append(cache[key])
    return np.stack(out)


def true_user_values(algorithm: str, env: Environment, grid: PriceGrid, means: np.ndarray,
                     utilities=None, config: SumConfig | None = None) -> np.ndarray:
    """(n, O) true utility of each user at each option.

    SPR uses the coordinator utilities; SUM evaluates the response-implied
    utility with the true parameter.
    """
    if algorithm == "spr":
        return np.stack([utilities[i](means[i]) for i in range(env.users)])
    if algorithm != "sum":
        raise ValueError(f"unknown algorithm {algorithm!r}")
    out = np.empty(means.shape[:2])
    cache: dict = {}
    for i, model in enumerate(env.models):
        key = (id(model.basis), model.theta_true.tobytes())
        if key not in cache:
            cache[key] = utility_batch(model.basis, model.theta_true, means[i], config)
        out[i] = cache[key]
    return out


@dataclass(frozen=True)
class CandidateTable:
    """Every joint candidate's true value and true feasibility."""

    joint: np.ndarray        # (C, G)
    value: np.ndarray        # (C,)
    margin: np.ndarray       # (C,) min_(j,v) c_j - true load

    @property
    def feasible(self) -> np.ndarray:
        return self.margin >= 0

    def index(self, joint) -> int:
        o = int(self.joint.max()) + 1 if len(self.joint) else 1
        k = 0
        for g in np.asarray(joint, dtype=int):
            k = k * o + int(g)
        return k


def candidate_table(grid: PriceGrid, constraints: ConstraintSet, means: np.ndarray,
                    user_values: np.ndarray) -> CandidateTable:
    joint = grid.joint_indices()
    loads = candidate_loads(grid, constraints, means, means, joint)
    margin = np.min(constraints.limits[None, :, None] - loads, axis=(1, 2))
    value = np.zeros(len(joint))
    for g, members in enumerate(grid.groups):
        value += user_values[list(members)].sum(axis=0)[joint[:, g]]
    return CandidateTable(joint, value, margin)


def oracle_optimal(table: CandidateTable) -> tuple[np.ndarray, float]:
    """Best truly feasible candidate; the first one in enumeration order on ties."""
    ok = np.flatnonzero(table.feasible)
    if not len(ok):
        raise ScenarioError("no grid candidate is feasible under the true response")
    best = int(ok[np.argmax(table.value[ok])])
    return table.joint[best], float(table.value[best])


def regret_series(trace: ExperimentTrace, oracle_value: float, table: CandidateTable):
    """Instantaneous regret r_t from true mean consumption, and its total."""
    played = np.array([table.index(j) for j in trace.joint], dtype=int)
    r = oracle_value - table.value[played] if len(played) else np.zeros(0)
    return r, float(r.sum())


def rolling_sum(series, window: int) -> np.ndarray:
    if window < 1:
        raise ValueError("window must be at least 1")
    c = np.concatenate([[0.0], np.cumsum(series)])
    t = np.arange(1, len(series) + 1)
    return c[t] - c[np.maximum(t - window, 0)]


def true_margins(trace: ExperimentTrace, constraints: ConstraintSet) -> np.ndarray:
    """(T,) min_(j,v) c_j - load under the true mean consumption."""
    if not len(trace):
        return np.zeros(0)
    loads = np.einsum("pi,tiv->tpv", constraints.coefficients, trace.mean_consumption)
    return np.min(constraints.limits[None, :, None] - loads, axis=(1, 2))


def violation_count(trace: ExperimentTrace, constraints: ConstraintSet) -> int:
    return int(np.sum(true_margins(trace, constraints) < 0))


def cheapest_safe_point(grid: PriceGrid, safe_points) -> tuple[int, ...]:
    """The prior-safe candidate with the lowest summed user price (first on ties)."""
    totals = [float(grid.user_prices(p).sum()) for p in safe_points]
    return tuple(safe_points[int(np.argmin(totals))])


# ---------------------------------------------------------------------------
# trials


@dataclass
class Problem:
    algorithm: str
    env: Environment
    grid: PriceGrid
    constraints: ConstraintSet
    config: SprConfig | SumConfig
    table: CandidateTable
    units: np.ndarray | None = None


def build_problem(scenario: DRScenario, algorithm: str, seed=None, *, horizon=None, exploration=None,
                  delta=None, nu=None, sigma=None) -> Problem:
    """Environment, grid, constraints and policy config for one trial.

    ``seed`` drives the observation noise and the exploration draws; the
    hidden truth comes from the scenario's own seed.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    noise_seq, policy_seq = seq.spawn(2)
    grid, constraints = scenario.grid(), scenario.constraints()
    theta, b = scenario.truth(algorithm)
    sig = scenario.sigma[algorithm] if sigma is None else float(sigma)
    basis = scenario.basis(positive_domain=algorithm == "sum")
    env = Environment.build([basis] * scenario.users, theta, scenario.norm_bound, sig, noise_seq)
    common = dict(horizon=scenario.horizon if horizon is None else int(horizon),
                  exploration=scenario.exploration if exploration is None else int(exploration),
                  delta=scenario.delta if delta is None else float(delta),
                  nu=scenario.nu if nu is None else float(nu),
                  sigma=sig, norm_bound=scenario.norm_bound, margin=scenario.margin, seed=policy_seq)
    if common["horizon"] and common["exploration"] is not None and common["exploration"] > common["horizon"]:
        raise ConfigurationError(f"exploration {common['exploration']} exceeds horizon {common['horizon']}")
    means = true_option_means(env, grid)
    units = None
    if algorithm == "spr":
        config = SprConfig(utilities=spr_utilities(b), **common)
        values = true_user_values("spr", env, grid, means, config.utilities)
    else:
        config = SumConfig(**common)
        values = true_user_values("sum", env, grid, means, config=config)
        units = grid.group_of
    return Problem(algorithm, env, grid, constraints, config, candidate_table(grid, constraints, means, values),
                   units)


def run_problem(problem: Problem) -> ExperimentTrace:
    if problem.algorithm == "spr":
        trace = run_spr(problem.env, problem.constraints, problem.grid, problem.config)
    else:
        trace = run_sum(problem.env, problem.constraints, problem.grid, problem.config, problem.units)
    _, oracle_value = oracle_optimal(problem.table)
    trace.regret, _ = regret_series(trace, oracle_value, problem.table)
    return trace


def summarize(problem: Problem, trace: ExperimentTrace, seed, trial: int, window: int) -> dict:
    joint, value = oracle_optimal(problem.table)
    cfg = problem.config
    d0 = initial_safe_points(problem.grid, problem.constraints, problem.env.bases, cfg.norm_bound, cfg.margin)
    base = problem.table.index(cheapest_safe_point(problem.grid, d0))
    return {
        "algorithm": problem.algorithm,
        "seed": seed,
        "trial": trial,
        "horizon": cfg.horizon,
        "exploration": cfg.exploration,
        "cumulative_regret": float(np.sum(trace.regret)),
        "violations": violation_count(trace, problem.constraints),
        "fallback_steps": int(np.sum(trace.fallback)),
        "oracle_joint": [int(k) for k in joint],
        "oracle_value": value,
        "baseline_joint": [int(k) for k in problem.table.joint[base]],
        "baseline_regret": float(cfg.horizon * (value - problem.table.value[base])),
        "window": window,
        "config": {"delta": cfg.delta, "nu": cfg.nu, "sigma": cfg.sigma, "norm_bound": cfg.norm_bound,
                   "margin": cfg.margin},
    }


def trial_seed(seed: int, trial: int) -> np.random.SeedSequence:
    """Trial k's stream depends only on (seed, k)."""
    return np.random.SeedSequence([int(seed), int(trial)])


def run_trial(scenario: DRScenario, algorithm: str, seed: int, trial: int = 0, window: int = 20, **overrides):
    problem = build_problem(scenario, algorithm, trial_seed(seed, trial), **overrides)
    trace = run_problem(problem)
    return problem, trace, summarize(problem, trace, seed, trial, window)


# ---------------------------------------------------------------------------
# output files


def trace_rows(trace: ExperimentTrace, constraints: ConstraintSet, window: int):
    T, G, V = trace.group_prices.shape
    n = trace.observations.shape[1]
    header = (["t"] + [f"g{g + 1}_p{v + 1}" for g in range(G) for v in range(V)]
              + [f"u{i + 1}_x{v + 1}" for i in range(n) for v in range(V)]
              + ["safe", "explore", "fallback", "true_margin", "regret", f"rolling_regret_{window}"])
    regret = trace.regret if trace.regret is not None else np.zeros(T)
    rolling = rolling_sum(regret, window)
    margins = true_margins(trace, constraints)
    rows = []
    for t in range(T):
        rows.append([t + 1] + [repr(float(x)) for x in trace.group_prices[t].ravel()]
                    + [repr(float(x)) for x in trace.observations[t].ravel()]
                    + [int(trace.safe[t]), int(trace.explore[t]), int(trace.fallback[t]),
                       repr(float(margins[t])), repr(float(regret[t])), repr(float(rolling[t]))])
    return header, rows


def write_outputs(trace: ExperimentTrace, directory, summary: dict, constraints: ConstraintSet,
                  window: int = 20) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header, rows = trace_rows(trace, constraints, window)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    trace_path = directory / "trace.csv"
    trace_path.write_text(buf.getvalue(), encoding="utf-8")
    summary_path = directory / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return trace_path, summary_path


def run_experiment(scenario: DRScenario, algorithm: str, trials: int, seed: int, out=None, window: int = 20,
                   log=None, **overrides) -> dict:
    if trials < 0:
        raise ValueError("trials must be nonnegative")
    summaries = []
    for k in range(trials):
        start = time.perf_counter()
        problem, trace, summary = run_trial(scenario, algorithm, seed, k, window, **overrides)
        if out is not None:
            write_outputs(trace, Path(out) / f"trial_{k}", summary, problem.constraints, window)
        summaries.append(summary)
        if log:
            log(f"trial {k}: R_T={summary['cumulative_regret']:.3f} violations={summary['violations']} "
                f"({time.perf_counter() - start:.1f}s)")
    agg = {
        "algorithm": algorithm,
        "seed": seed,
        "trials": trials,
        "violations": int(sum(s["violations"] for s in summaries)),
        "cumulative_regret": [s["cumulative_regret"] for s in summaries],
        "baseline_regret": [s["baseline_regret"] for s in summaries],
    }
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "summary.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return agg


# ---------------------------------------------------------------------------
# CLI


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="safe-pricing", description="Run safe pricing experiments on a DR scenario.")
    ap.add_argument("--scenario", default="default", help="scenario JSON path, or 'default'")
    ap.add_argument("--algo", choices=ALGORITHMS, default="spr")
    ap.add_argument("--trials", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--horizon", type=int)
    ap.add_argument("--explore", type=int, help="length of the exploration phase")
    ap.add_argument("--delta", type=float)
    ap.add_argument("--nu", type=float)
    ap.add_argument("--sigma", type=float)
    ap.add_argument("--window", type=int, default=20, help="rolling regret window")
    ap.add_argument("--out", default="runs")
    return ap


def main(argv=None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    if args.trials < 0:
        ap.error("--trials must be nonnegative")
    if args.window < 1:
        ap.error("--window must be at least 1")
    try:
        scenario = load_scenario(args.scenario)
        agg = run_experiment(scenario, args.algo, args.trials, args.seed, args.out, args.window,
                             log=lambda s: print(s, file=sys.stderr), horizon=args.horizon,
                             exploration=args.explore, delta=args.delta, nu=args.nu, sigma=args.sigma)
    except (ScenarioError, ConfigurationError, ValueError) as e:
        print(f"safe-pricing: error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(agg))
    return 0


if __name__ == "__main__":
    sys.exit(main())
