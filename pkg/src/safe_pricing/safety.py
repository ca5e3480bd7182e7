"""Linear consumption constraints and safety certification of price candidates."""

from __future__ import annotations

from dataclasses import dataclass, field
import itertools
from typing import Sequence

import numpy as np

from .estimator import ConfidenceEllipsoid


class ConfigurationError(ValueError):
    """The scenario admits no safe starting prices or is otherwise unusable."""


@dataclass(frozen=True)
class ConstraintSet:
    """Rows ``sum_i a_ji x_{i,v} <= c_j`` applied to every period v."""

    coefficients: np.ndarray
    limits: np.ndarray
    coefficient_bound: float | None = None
    names: tuple[str, ...] = ()

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.coefficients, dtype=float))
        c = np.asarray(self.limits, dtype=float).reshape(-1)
        if a.shape[0] != c.shape[0] or a.shape[0] < 1:
            raise ValueError("need one limit per constraint row and at least one row")
        if not np.all(np.isfinite(c)):
            raise ValueError("limits must be finite")
        kappa = float(np.max(np.abs(a))) if self.coefficient_bound is None else float(self.coefficient_bound)
        if np.max(np.abs(a)) > kappa * (1 + 1e-12):
            raise ValueError("coefficient_bound is smaller than max |a_ji|")
        names = tuple(self.names) or tuple(f"row{j}" for j in range(a.shape[0]))
        object.__setattr__(self, "coefficients", a)
        object.__setattr__(self, "limits", c)
        object.__setattr__(self, "coefficient_bound", kappa)
        object.__setattr__(self, "names", names)

    @property
    def rows(self) -> int:
        return self.coefficients.shape[0]

    @property
    def users(self) -> int:
        return self.coefficients.shape[1]

    def load(self, consumption) -> np.ndarray:
        """p x V load for an n x V consumption matrix."""
        return self.coefficients @ np.asarray(consumption, dtype=float)

    def feasible(self, consumption, tol: float = 0.0) -> bool:
        return bool(np.all(self.load(consumption) <= self.limits[:, None] + tol))


@dataclass(frozen=True)
class PriceGrid:
    """Users partitioned into groups; each group gets one profile from levels^V."""

    groups: tuple[tuple[int, ...], ...]
    levels: tuple[float, ...]
    periods: int
    group_of: np.ndarray = field(init=False, repr=False)
    options: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        groups = tuple(tuple(int(u) for u in g) for g in self.groups)
        members = sorted(u for g in groups for u in g)
        if not groups or members != list(range(len(members))):
            raise ValueError("every user 0..n-1 must belong to exactly one group")
        if not self.levels or self.periods < 1:
            raise ValueError("need at least one price level and one period")
        group_of = np.empty(len(members), dtype=int)
        for k, g in enumerate(groups):
            group_of[list(g)] = k
        options = np.array(list(itertools.product(self.levels, repeat=self.periods)), dtype=float)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "levels", tuple(float(x) for x in self.levels))
        object.__setattr__(self, "group_of", group_of)
        object.__setattr__(self, "options", options)

    @property
    def users(self) -> int:
        return len(self.group_of)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_options(self) -> int:
        return len(self.options)

    def joint_indices(self) -> np.ndarray:
        """(C, G) option indices of every joint candidate, in enumeration order."""
        o = self.n_options
        return np.array(list(itertools.product(range(o), repeat=self.n_groups)), dtype=int).reshape(-1, self.n_groups)

    def user_prices(self, joint) -> np.ndarray:
        """n x V prices for a joint candidate given as per-group option indices."""
        joint = np.asarray(joint, dtype=int)
        return self.options[joint[self.group_of]]

    def group_prices(self, joint) -> np.ndarray:
        return self.options[np.asarray(joint, dtype=int)]


def enumerate_joint(grid: PriceGrid) -> list[tuple[tuple[float, ...], ...]]:
    """Every joint assignment as per-group price tuples, lexicographic by
    (group, period, level index)."""
    return [tuple(tuple(grid.options[o]) for o in joint) for joint in grid.joint_indices()]


@dataclass(frozen=True)
class SafetyCertificate:
    price: np.ndarray
    load: np.ndarray
    safe: bool
    margin: float


def _split(a: np.ndarray):
    return np.maximum(a, 0.0), np.minimum(a, 0.0)


def worst_case_load(constraints: ConstraintSet, joint_price, ellipsoids: Sequence[ConfidenceEllipsoid],
                    bases) -> np.ndarray:
    """Largest p x V load over every parameter in the confidence sets."""
    prices = np.asarray(joint_price, dtype=float)
    n = constraints.users
    upper = np.empty((n, prices.shape[1]))
    lower = np.empty_like(upper)
    for i in range(n):
        upper[i], lower[i] = ellipsoids[i].bounds(bases[i](prices[i]))
    a_pos, a_neg = _split(constraints.coefficients)
    return a_pos @ upper + a_neg @ lower


def certify_from_load(constraints: ConstraintSet, price, load) -> SafetyCertificate:
    margin = float(np.min(constraints.limits[:, None] - load))
    return SafetyCertificate(np.asarray(price, dtype=float), load, margin >= 0, margin)


def certify_safe(constraints: ConstraintSet, joint_price, ellipsoids, bases) -> SafetyCertificate:
    load = worst_case_load(constraints, joint_price, ellipsoids, bases)
    return certify_from_load(constraints, joint_price, load)


def option_features(grid: PriceGrid, bases) -> np.ndarray:
    """(n, O, V, m) basis matrices of every user at every option of its group."""
    cache: dict[int, np.ndarray] = {}
    out = []
    for i in range(grid.users):
        key = id(bases[i])
        if key not in cache:
            cache[key] = bases[i].batch(grid.options)
        out.append(cache[key])
    return np.stack(out)


def prior_bounds(features: np.ndarray, norm_bound) -> tuple[np.ndarray, np.ndarray]:
    """Max and min of h^T theta over {theta >= 0, ||theta|| <= S} for every row."""
    s = np.broadcast_to(np.asarray(norm_bound, dtype=float), features.shape[:1])
    s = s.reshape((-1,) + (1,) * (features.ndim - 2))
    up = s * np.linalg.norm(np.maximum(features, 0.0), axis=-1)
    lo = -s * np.linalg.norm(np.maximum(-features, 0.0), axis=-1)
    return up, lo


def candidate_loads(grid: PriceGrid, constraints: ConstraintSet, upper: np.ndarray, lower: np.ndarray,
                    joint: np.ndarray | None = None) -> np.ndarray:
    """(C, p, V) worst-case loads of joint candidates from per-user (n, O, V)
    consumption bounds. Loads separate by group, so they are summed per group
    option first."""
    if joint is None:
        joint = grid.joint_indices()
    a_pos, a_neg = _split(constraints.coefficients)
    total = np.zeros((len(joint), constraints.rows, grid.periods))
    for g, members in enumerate(grid.groups):
        m = list(members)
        per_option = (np.einsum("pi,iov->opv", a_pos[:, m], upper[m])
                      + np.einsum("pi,iov->opv", a_neg[:, m], lower[m]))
        total += per_option[joint[:, g]]
    return total


def load_margins(constraints: ConstraintSet, loads: np.ndarray) -> np.ndarray:
    """Binding margin min_(j,v) c_j - load for each candidate."""
    return np.min(constraints.limits[None, :, None] - loads, axis=(1, 2))


def initial_safe_points(grid: PriceGrid, constraints: ConstraintSet, bases, norm_bound,
                        margin: float = 0.0) -> list[tuple[int, ...]]:
    """Grid candidates safe for every theta in the prior ball, with slack ``margin``.

    Candidates are returned as per-group option index tuples in enumeration
    order.
    """
    if np.any(np.asarray(norm_bound) <= 0):
        raise ValueError("norm_bound must be positive")
    joint = grid.joint_indices()
    up, lo = prior_bounds(option_features(grid, bases), norm_bound)
    loads = candidate_loads(grid, constraints, up, lo, joint)
    slack = constraints.limits[None, :, None] - margin - loads
    ok = np.all(slack >= 0, axis=(1, 2))
    if not ok.any():
        best = int(np.argmax(np.min(slack, axis=(1, 2))))
        j, v = np.unravel_index(np.argmin(slack[best]), slack[best].shape)
        raise ConfigurationError(
            f"initial safe set is empty: tightest constraint {constraints.names[j]!r} "
            f"(period {v + 1}) exceeds its limit by {-slack[best, j, v]:.6g} "
            f"even at the best candidate")
    return [tuple(int(x) for x in row) for row in joint[ok]]
