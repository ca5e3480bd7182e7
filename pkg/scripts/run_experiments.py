"""Run SPR and SUM on the bundled feeder for several trials and print a summary.

    python3 scripts/run_experiments.py [--trials 5] [--seed 1] [--horizon 365] [--out runs/]

With --out, each trial's trace.csv and summary.json are written under
<out>/<algo>/trial_<k>/, plus a rolling_regret.csv with the mean rolling
regret across trials (one column per algorithm).
"""

import argparse
from pathlib import Path
import time

import numpy as np

from safe_pricing.dr_scenario import load_scenario
from safe_pricing.harness import rolling_sum, run_trial, write_outputs


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default="default")
    ap.add_argument("--algo", nargs="+", default=["spr", "sum"], choices=["spr", "sum"])
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--horizon", type=int)
    ap.add_argument("--window", type=int, default=20)
    ap.add_argument("--out")
    args = ap.parse_args()

    scenario = load_scenario(args.scenario)
    curves = {}
    print(f"{'algo':5} {'trial':>5} {'R_T':>12} {'baseline':>12} {'early':>9} {'late':>9} {'viol':>5} {'sec':>6}")
    for algo in args.algo:
        rolling = []
        for k in range(args.trials):
            start = time.perf_counter()
            problem, trace, summary = run_trial(scenario, algo, args.seed, k, args.window, horizon=args.horizon)
            T, t0 = len(trace), trace.exploration_steps
            q = max(T // 4, 1)
            early = trace.regret[t0:t0 + q].mean() if T > t0 else float("nan")
            late = trace.regret[T - q:].mean() if T else float("nan")
            print(f"{algo:5} {k:5d} {summary['cumulative_regret']:12.4g} {summary['baseline_regret']:12.4g} "
                  f"{early:9.4g} {late:9.4g} {summary['violations']:5d} {time.perf_counter() - start:6.1f}")
            rolling.append(rolling_sum(trace.regret, args.window))
            if args.out:
                write_outputs(trace, Path(args.out) / algo / f"trial_{k}", summary, problem.constraints, args.window)
        if rolling:
            curves[algo] = np.mean(rolling, axis=0)

    if args.out and curves:
        path = Path(args.out) / "rolling_regret.csv"
        names = list(curves)
        rows = np.column_stack([np.arange(1, len(curves[names[0]]) + 1)] + [curves[a] for a in names])
        np.savetxt(path, rows, delimiter=",", header=",".join(["t"] + names), comments="", fmt="%.10g")
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
