"""Safe price response: uniform exploration over the prior-safe grid points, then
optimistic pricing restricted to candidates certified safe by the confidence sets."""

from __future__ import annotations

from dataclasses import dataclass
import math
import time
from typing import Callable, Sequence

import numpy as np

from .estimator import BetaSchedule, ConfidenceEllipsoid, RlsState, sqrt_beta, update
from .response import Environment
from .safety import (
    ConfigurationError,
    ConstraintSet,
    PriceGrid,
    SafetyCertificate,
    candidate_loads,
    certify_from_load,
    initial_safe_points,
    load_margins,
    option_features,
    prior_bounds,
)
from .trace import ExperimentTrace


@dataclass(frozen=True)
class LogUtility:
    """weight * sum_v log(x_v + 1), strictly increasing in every period."""

    weight: float

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError("utility weight must be positive")

    def __call__(self, x) -> np.ndarray:
        return self.weight * np.sum(np.log1p(np.asarray(x, dtype=float)), axis=-1)


@dataclass
class SprConfig:
    horizon: int
    utilities: Sequence[Callable]
    exploration: int | None = None
    delta: float = 0.01
    nu: float = 10.0
    sigma: float = 1.5
    norm_bound: float = 1.0
    basis_bound: float | None = None
    margin: float = 0.0
    nonneg_clip: bool = False
    fixed_radius: float | None = None
    seed: int | np.random.SeedSequence | None = None

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        self.exploration = exploration_horizon(self.horizon, self.exploration) if self.horizon else 0
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.nu <= 0 or self.norm_bound <= 0:
            raise ValueError("nu and norm_bound must be positive")


def exploration_horizon(horizon: int, override: int | None = None) -> int:
    """Length of the pure exploration phase: ceil(T^(2/3)) unless overridden."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if override is not None:
        if not 1 <= override <= horizon:
            raise ValueError(f"exploration override {override} outside [1, {horizon}]")
        return int(override)
    return min(horizon, math.ceil(round(horizon ** (2.0 / 3.0), 9)))


def explore_step(safe_points: Sequence[tuple[int, ...]], rng: np.random.Generator) -> tuple[int, ...]:
    if len(safe_points) == 0:
        raise ConfigurationError("no initial safe prices to explore")
    return tuple(safe_points[int(rng.integers(len(safe_points)))])


@dataclass(frozen=True)
class OptimisticChoice:
    joint: tuple[int, ...]
    price: np.ndarray
    value: float
    certificate: SafetyCertificate


def ellipsoid_bounds(features: np.ndarray, ellipsoids: Sequence[ConfidenceEllipsoid],
                     keys: Sequence | None = None):
    """Per-user support bounds (n, O, V) at every grid option.

    Users with the same ``keys`` entry and the same ellipsoid object share
    their result.
    """
    n, o, v, m = features.shape
    upper = np.empty((n, o, v))
    lower = np.empty((n, o, v))
    seen: dict = {}
    for i in range(n):
        key = None if keys is None else (id(ellipsoids[i]), keys[i])
        if key is not None and key in seen:
            upper[i], lower[i] = upper[seen[key]], lower[seen[key]]
            continue
        up, lo = ellipsoids[i].bounds(features[i].reshape(-1, m))
        upper[i], lower[i] = up.reshape(o, v), lo.reshape(o, v)
        if key is not None:
            seen[key] = i
    return upper, lower


def group_values(grid: PriceGrid, per_user: np.ndarray) -> np.ndarray:
    """Sum (n, O) per-user values into (G, O) group-option values."""
    return np.stack([per_user[list(g)].sum(axis=0) for g in grid.groups])


def select_optimistic(grid: PriceGrid, constraints: ConstraintSet, joint: np.ndarray,
                      upper: np.ndarray, lower: np.ndarray, values: np.ndarray):
    """Best certified-safe joint candidate; ties go to the earliest candidate.

    Returns (candidate index, value, loads) or None when nothing certifies.
    """
    loads = candidate_loads(grid, constraints, upper, lower, joint)
    safe = load_margins(constraints, loads) >= 0
    if not safe.any():
        return None
    total = np.zeros(len(joint))
    for g in range(grid.n_groups):
        total += values[g, joint[:, g]]
    idx = np.flatnonzero(safe)
    best = int(idx[np.argmax(total[idx])])
    return best, float(total[best]), loads[best]


def spr_values(grid: PriceGrid, upper: np.ndarray, utilities) -> np.ndarray:
    x_opt = np.maximum(upper, 0.0)
    per_user = np.stack([utilities[i](x_opt[i]) for i in range(grid.users)])
    return group_values(grid, per_user)


def optimistic_step(grid: PriceGrid, ellipsoids, constraints: ConstraintSet, bases, utilities,
                    features: np.ndarray | None = None) -> OptimisticChoice | None:
    """Safe candidate maximizing the summed utility of optimistic consumption.

    Optimistic consumption in period v is the support-function maximum of
    h_v(price)^T theta, taken separately per period, so the value is an upper
    bound on the best value attainable inside the confidence sets.
    """
    if features is None:
        features = option_features(grid, bases)
    joint = grid.joint_indices()
    upper, lower = ellipsoid_bounds(features, ellipsoids)
    picked = select_optimistic(grid, constraints, joint, upper, lower, spr_values(grid, upper, utilities))
    if picked is None:
        return None
    c, value, load = picked
    price = grid.user_prices(joint[c])
    return OptimisticChoice(tuple(int(k) for k in joint[c]), price, value,
                            certify_from_load(constraints, price, load))


def basis_bound(features: np.ndarray) -> float:
    """Largest row norm ||h_v(price)|| over users, grid options and periods."""
    return float(np.max(np.linalg.norm(features, axis=-1)))


def run_safe_pricing(algorithm: str, env: Environment, constraints: ConstraintSet, grid: PriceGrid,
                     config, scorer, units: np.ndarray | None = None) -> ExperimentTrace:
    """Shared exploration/OFU loop.

    ``scorer(ellipsoids, upper, lower) -> (G, O)`` values each group option
    given the per-user ellipsoids and optimistic consumption bounds. ``units``
    maps users to estimation units (default: one per user); users in a unit
    pool their observations into one regularized least-squares state.
    """
    start = time.perf_counter()
    n, v = grid.users, grid.periods
    if env.users != n or constraints.users != n:
        raise ValueError("environment, constraints and grid disagree on the number of users")
    seed = config.seed
    if config.horizon == 0:
        return ExperimentTrace.empty(algorithm, grid.n_groups, n, v, seed)

    rng = np.random.default_rng(seed)
    bases = env.bases
    features = option_features(grid, bases)
    keys = [id(b) for b in bases]
    m = features.shape[-1]
    joint = grid.joint_indices()

    safe_points = initial_safe_points(grid, constraints, bases, config.norm_bound, config.margin)
    prior_up, prior_lo = prior_bounds(features, config.norm_bound)
    prior_loads = candidate_loads(grid, constraints, prior_up, prior_lo, joint)
    lookup = {tuple(row): k for k, row in enumerate(joint)}

    units = np.arange(n) if units is None else np.asarray(units, dtype=int)
    n_units = int(units.max()) + 1
    states = [RlsState.initial(m, config.nu) for _ in range(n_units)]
    schedule = BetaSchedule(config.sigma, m, config.nu, config.norm_bound, config.delta, n_units,
                            config.basis_bound or max(basis_bound(features), 1e-12))

    T = config.horizon
    G = grid.n_groups
    chosen = np.zeros((T, G), dtype=int)
    obs = np.zeros((T, n, v))
    means = np.zeros((T, n, v))
    certificates: list[SafetyCertificate] = []
    explore = np.zeros(T, dtype=bool)
    fallback = np.zeros(T, dtype=bool)
    opt_value = np.full(T, np.nan)

    for t in range(T):
        if t < config.exploration:
            pick = explore_step(safe_points, rng)
            c = lookup[pick]
            explore[t] = True
            load = prior_loads[c]
        else:
            radii = [config.fixed_radius if config.fixed_radius is not None
                     else sqrt_beta(schedule, s.sample_count) for s in states]
            unit_ells = [ConfidenceEllipsoid.from_state(s, r, config.nonneg_clip) for s, r in zip(states, radii)]
            ells = [unit_ells[u] for u in units]
            upper, lower = ellipsoid_bounds(features, ells, keys)
            picked = select_optimistic(grid, constraints, joint, upper, lower, scorer(ells, upper, lower))
            if picked is None:
                c = lookup[explore_step(safe_points, rng)]
                fallback[t] = True
                load = prior_loads[c]
            else:
                c, opt_value[t], load = picked
        chosen[t] = joint[c]
        prices = grid.user_prices(joint[c])
        certificates.append(certify_from_load(constraints, prices, load))
        means[t] = env.mean(prices)
        obs[t] = means[t] + env.noise(v)
        for i in range(n):
            u = units[i]
            states[u] = update(states[u], features[i, joint[c, grid.group_of[i]]], obs[t, i])

    return ExperimentTrace(
        algorithm, chosen, grid.options[chosen], obs, means, certificates, explore, fallback,
        opt_value, config.exploration, seed if isinstance(seed, int) else None,
        wall_clock=time.perf_counter() - start,
        meta={"final_states": states, "basis_bound": schedule.basis_bound, "units": units},
    )


def run_spr(env: Environment, constraints: ConstraintSet, grid: PriceGrid, config: SprConfig) -> ExperimentTrace:
    if len(config.utilities) != grid.users:
        raise ValueError("need one utility per user")

    def scorer(ells, upper, lower):
        return spr_values(grid, upper, config.utilities)

    return run_safe_pricing("spr", env, constraints, grid, config, scorer)
