"""Write the bundled 37-user demand-response scenario.

The feeder is synthetic: a 10-node trunk with three laterals. Every line
except the substation head is rated well above any load it can carry, so the
head line is the one binding limit. Its rating is chosen so that, under the
generated truth, the best grid price serves two groups at the low price
profile while the prior-safe set only admits one.

    python3 scripts/make_default_scenario.py [--out PATH] [--check]
"""

import argparse
import json
from pathlib import Path

import numpy as np

from safe_pricing.dr_scenario import DEFAULT_SCENARIO, parse_scenario
from safe_pricing.safety import initial_safe_points
from safe_pricing.harness import build_problem, oracle_optimal, true_option_means

CLUSTERS = [
    {"name": "inflexible", "preference_offset": 5.0, "appliances": [
        {"name": "lighting", "power_w": 200, "intervals": [2, 3], "mode": "fixed"},
        {"name": "cooking", "power_w": 500, "intervals": [3], "mode": "fixed"},
    ]},
    {"name": "flexible", "preference_offset": 5.0, "appliances": [
        {"name": "ev_charging", "power_w": 500, "intervals": [1, 3], "mode": "one_of"},
        {"name": "washer", "power_w": 300, "intervals": [2, 3], "mode": "one_of"},
        {"name": "hvac", "power_w": 600, "intervals": [1, 2, 3], "mode": "one_of"},
        {"name": "entertainment", "power_w": 200, "intervals": [2, 3], "mode": "one_of"},
    ]},
]

GROUPS = [list(range(11, 26)), list(range(29, 36)), list(range(1, 11)) + [26, 27, 28, 36, 37]]


def topology():
    """(parent, node) pairs; node k hosts user k, node 0 is the substation."""
    edges = [(k - 1, k) for k in range(1, 11)]            # trunk 1..10
    edges += [(3, 11)] + [(k - 1, k) for k in range(12, 26)]   # lateral A: 11..25
    edges += [(7, 26), (26, 27), (27, 28)]                 # lateral B
    edges += [(8, 29)] + [(k - 1, k) for k in range(30, 36)]   # lateral C: 29..35
    edges += [(10, 36), (36, 37)]
    return edges


def build(head_kw: float, seed: int = 2023) -> dict:
    rng = np.random.default_rng(seed)
    lines = []
    for parent, node in topology():
        r = float(np.round(rng.uniform(0.002, 0.008), 4))
        lines.append({"name": f"L{parent}-{node}", "parent": parent, "node": node, "r_pu": r,
                      "s_max_kw": head_kw if parent == 0 else 100.0})
    return {
        "users": 37,
        "periods": 3,
        "clusters": CLUSTERS,
        "groups": GROUPS,
        "price_levels": [2, 5],
        "network": {
            "s_base_kva": 1000.0,
            "nodes": [{"id": 0}] + [{"id": k, "user": k} for k in range(1, 38)],
            "lines": lines,
        },
        "limits": {"v0_pu": 1.0, "v_min_pu": 0.95, "v_max_pu": 1.05},
        "learning": {"T": 365, "nu": 10, "delta": 0.01, "sigma": {"spr": 1.5, "sum": 3.0}},
        "truth": {"theta_range": [0.5, 1.0], "b_range": [0.0, 1.0], "seed": seed},
    }


def describe(raw: dict) -> None:
    sc = parse_scenario(raw)
    grid, cons = sc.grid(), sc.constraints()
    d0 = initial_safe_points(grid, cons, [sc.basis()] * sc.users, sc.norm_bound, sc.margin)
    print(f"|D0| = {len(d0)} of {len(grid.joint_indices())}")
    head = [j for j, name in enumerate(cons.names) if name.startswith("flow:L0-")]
    for algo in ("spr", "sum"):
        problem = build_problem(sc, algo, 0)
        joint, value = oracle_optimal(problem.table)
        means = true_option_means(problem.env, grid)
        load = cons.load(means[np.arange(sc.users), joint[grid.group_of]])
        slack = float(np.min(cons.limits[head, None] - load[head]))
        print(f"{algo}: oracle {tuple(int(k) for k in joint)} value {value:.4f}, "
              f"in D0: {tuple(joint) in set(d0)}, head-line slack {slack:.0f} W")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(DEFAULT_SCENARIO))
    ap.add_argument("--head-kw", type=float, default=4.05)
    ap.add_argument("--check", action="store_true", help="print D0 size and oracle prices")
    args = ap.parse_args()
    raw = build(args.head_kw)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(raw, indent=1) + "\n", encoding="utf-8")
    print(f"wrote {args.out}")
    if args.check:
        describe(raw)


if __name__ == "__main__":
    main()
