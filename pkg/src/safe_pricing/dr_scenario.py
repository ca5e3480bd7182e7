"""Demand-response instantiation: appliance clusters, preference sigmoids, feeder constraints."""

from __future__ import annotations

from dataclasses import dataclass, field
import json
from pathlib import Path

import numpy as np

from .response import BasisFunction
from .safety import ConstraintSet, PriceGrid

DEFAULT_SCENARIO = Path(__file__).parent / "data" / "default_scenario.json"


class ScenarioError(ValueError):
    """Invalid scenario file or network."""


@dataclass(frozen=True)
class Appliance:
    """One appliance. ``mode`` is "fixed" (on in every listed interval) or
    "one_of" (on in exactly one listed interval, the cheapest).

    Intervals are 1-based, as in a day's period numbering.
    """

    name: str
    power_w: float
    intervals: tuple[int, ...]
    mode: str = "fixed"

    def __post_init__(self):
        if self.power_w <= 0:
            raise ScenarioError(f"appliance {self.name!r}: power must be positive")
        if self.mode not in ("fixed", "one_of"):
            raise ScenarioError(f"appliance {self.name!r}: unknown mode {self.mode!r}")
        if not self.intervals:
            raise ScenarioError(f"appliance {self.name!r}: no intervals")
        object.__setattr__(self, "intervals", tuple(sorted(int(k) for k in self.intervals)))


@dataclass(frozen=True)
class ApplianceCluster:
    appliances: tuple[Appliance, ...]
    preference_offset: float = 5.0
    name: str = ""

    def validate(self, periods: int) -> None:
        for a in self.appliances:
            if min(a.intervals) < 1 or max(a.intervals) > periods:
                raise ScenarioError(f"appliance {a.name!r}: interval outside [1, {periods}]")


def schedule_cluster_batch(cluster: ApplianceCluster, prices: np.ndarray) -> np.ndarray:
    """Cost-minimizing power profiles (W) for an (N, V) batch of prices."""
    prices = np.atleast_2d(prices)
    profile = np.zeros_like(prices, dtype=float)
    rows = np.arange(prices.shape[0])
    for a in cluster.appliances:
        idx = np.asarray(a.intervals) - 1
        if a.mode == "fixed":
            profile[:, idx] += a.power_w
        else:
            # argmin returns the first minimum, i.e. the lowest interval on ties
            pick = idx[np.argmin(prices[:, idx], axis=1)]
            profile[rows, pick] += a.power_w
    return profile


def schedule_cluster(cluster: ApplianceCluster, price) -> np.ndarray:
    return schedule_cluster_batch(cluster, np.asarray(price, dtype=float).reshape(1, -1))[0]


def preference_weight(price, offset: float = 5.0):
    """Shifted sigmoid 1 / (1 + exp(sum(price) - offset)); batches along the last axis."""
    total = np.sum(np.asarray(price, dtype=float), axis=-1)
    # expit form avoids overflow for large totals
    return 0.5 * (1.0 - np.tanh(0.5 * (total - offset)))


class ApplianceBasis(BasisFunction):
    """Column k is cluster k's cost-minimizing profile scaled by its preference weight."""

    def __init__(self, clusters, periods: int, positive_domain: bool = False):
        self.clusters = tuple(clusters)
        self.periods = periods
        self.dim = len(self.clusters)
        self.positive_domain = positive_domain
        for c in self.clusters:
            c.validate(periods)

    def patterns(self, prices) -> np.ndarray:
        """(N, V, m) unweighted schedules; these depend only on price differences."""
        prices = np.atleast_2d(np.asarray(prices, dtype=float))
        return np.stack([schedule_cluster_batch(c, prices) for c in self.clusters], axis=-1)

    def weights(self, totals) -> np.ndarray:
        """(..., m) preference weights as a function of the total price."""
        totals = np.asarray(totals, dtype=float)[..., None]
        offsets = np.array([c.preference_offset for c in self.clusters])
        return 0.5 * (1.0 - np.tanh(0.5 * (totals - offsets)))

    def _batch(self, prices):
        return self.patterns(prices) * self.weights(prices.sum(axis=1))[:, None, :]


def basis_eval(clusters, price) -> np.ndarray:
    price = np.asarray(price, dtype=float)
    return ApplianceBasis(clusters, price.shape[-1])(price)


# ---------------------------------------------------------------------------
# feeder network


@dataclass(frozen=True)
class Line:
    node: int             # downstream end
    parent: int           # upstream end
    r_pu: float
    s_max_kw: float
    name: str = ""


@dataclass(frozen=True)
class FeederNetwork:
    """Radial feeder. ``users`` maps node id -> 0-based user index; nodes
    without a user (the substation, junctions) are allowed."""

    nodes: tuple[int, ...]
    lines: tuple[Line, ...]
    users: dict
    v0_pu: float = 1.0
    v_min_pu: float = 0.95
    v_max_pu: float = 1.05
    s_base_kva: float = 1000.0
    root: int = field(init=False)

    def __post_init__(self):
        nodes = tuple(int(k) for k in self.nodes)
        if len(set(nodes)) != len(nodes):
            raise ScenarioError("network.nodes: duplicate node id")
        known = set(nodes)
        parent: dict[int, int] = {}
        for ln in self.lines:
            if ln.node not in known or ln.parent not in known:
                raise ScenarioError(f"network.lines: line {ln.name or ln.node} references an unknown node")
            if ln.node in parent:
                raise ScenarioError(f"network: node {ln.node} has two parent lines (cycle or mesh)")
            if ln.r_pu < 0 or ln.s_max_kw <= 0:
                raise ScenarioError(f"network.lines: line {ln.name or ln.node} needs r_pu >= 0 and s_max_kw > 0")
            parent[ln.node] = ln.parent
        roots = [k for k in nodes if k not in parent]
        if len(roots) != 1:
            # every node has a parent only when the lines close a loop
            raise ScenarioError("network: cycle detected (no root)" if not roots
                                else f"network: {len(roots)} roots, feeder must be connected")
        for k in nodes:
            seen = {k}
            while k in parent:
                k = parent[k]
                if k in seen:
                    raise ScenarioError(f"network: cycle through node {k}")
                seen.add(k)
        if not self.v_min_pu < self.v0_pu <= self.v_max_pu:
            raise ScenarioError("limits: need v_min_pu < v0_pu <= v_max_pu")
        if self.s_base_kva <= 0:
            raise ScenarioError("network.s_base_kva must be positive")
        if set(self.users) - known:
            raise ScenarioError("network: user placed on an unknown node")
        idx = sorted(self.users.values())
        if idx != list(range(len(idx))):
            raise ScenarioError("network: users must be numbered 0..n-1, one per node")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "root", roots[0])

    @property
    def n_users(self) -> int:
        return len(self.users)

    def path(self, node: int) -> list[Line]:
        """Lines from the root down to ``node``."""
        by_node = {ln.node: ln for ln in self.lines}
        out = []
        while node in by_node:
            out.append(by_node[node])
            node = by_node[node].parent
        return out[::-1]


def build_constraints(network: FeederNetwork) -> ConstraintSet:
    """Linearized feeder limits on per-user consumption in watts.

    One flow row per line (downstream consumption <= line rating) and one
    lower-voltage row per node with users downstream, using squared voltages
    and unity power factor. Upper-voltage rows are omitted: with loads only,
    voltages never rise above the substation value.
    """
    n = network.n_users
    paths = {k: {id(ln) for ln in network.path(k)} for k in network.nodes}
    user_node = {u: k for k, u in network.users.items()}
    rows, limits, names = [], [], []
    for ln in network.lines:
        row = np.zeros(n)
        for u in range(n):
            if id(ln) in paths[user_node[u]]:
                row[u] = 1.0
        rows.append(row)
        limits.append(1000.0 * ln.s_max_kw)
        names.append(f"flow:{ln.name or ln.node}")
    base_w = 1000.0 * network.s_base_kva
    lines = {id(ln): ln for ln in network.lines}
    budget = network.v0_pu ** 2 - network.v_min_pu ** 2
    for k in network.nodes:
        if k == network.root:
            continue
        row = np.zeros(n)
        for u in range(n):
            shared = paths[k] & paths[user_node[u]]
            row[u] = 2.0 * sum(lines[e].r_pu for e in shared) / base_w
        if np.any(row > 0):
            rows.append(row)
            limits.append(budget)
            names.append(f"vmin:{k}")
    a = np.array(rows)
    return ConstraintSet(a, np.array(limits), float(np.max(np.abs(a))), tuple(names))


# ---------------------------------------------------------------------------
# scenario file

SIGMA_DEFAULTS = {"spr": 1.5, "sum": 3.0}


@dataclass(frozen=True)
class DRScenario:
    users: int
    periods: int
    clusters: tuple[ApplianceCluster, ...]
    groups: tuple[tuple[int, ...], ...]     # 0-based user ids
    price_levels: tuple[float, ...]
    network: FeederNetwork
    horizon: int
    exploration: int | None
    nu: float
    delta: float
    sigma: dict
    margin: float
    norm_bound: float
    theta_range: tuple[float, float]
    b_range: tuple[float, float]
    seed: int
    source: str = ""

    def constraints(self) -> ConstraintSet:
        return build_constraints(self.network)

    def grid(self) -> PriceGrid:
        return PriceGrid(self.groups, self.price_levels, self.periods)

    def basis(self, positive_domain: bool = False) -> ApplianceBasis:
        return ApplianceBasis(self.clusters, self.periods, positive_domain)

    def truth(self, algorithm: str):
        """(theta*, b) drawn deterministically from ``seed``.

        For "sum" one theta is drawn per group and shared by its members.
        """
        lo, hi = self.theta_range
        rng = np.random.default_rng(self.seed)
        m = len(self.clusters)
        theta = rng.uniform(lo, hi, (self.users, m))
        b = rng.uniform(*self.b_range, self.users)
        if algorithm == "sum":
            shared = rng.uniform(lo, hi, (len(self.groups), m))
            for g, members in enumerate(self.groups):
                theta[list(members)] = shared[g]
        elif algorithm != "spr":
            raise ValueError(f"unknown algorithm {algorithm!r}")
        return theta, np.maximum(b, 1e-6)


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise ScenarioError(f"{path}.{key}: missing required field")
    return obj[key]


def _number(value, path: str, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{path}: expected a number, got {value!r}")
    if positive and value <= 0:
        raise ScenarioError(f"{path}: must be positive")
    return float(value)


def _parse_cluster(raw: dict, path: str) -> ApplianceCluster:
    apps = []
    for k, a in enumerate(_require(raw, "appliances", path)):
        p = f"{path}.appliances[{k}]"
        try:
            apps.append(Appliance(str(a.get("name", f"appliance{k}")), _number(_require(a, "power_w", p), f"{p}.power_w"),
                                  tuple(int(v) for v in _require(a, "intervals", p)), a.get("mode", "fixed")))
        except ScenarioError as e:
            raise ScenarioError(f"{p}: {e}") from None
    return ApplianceCluster(tuple(apps), _number(raw.get("preference_offset", 5.0), f"{path}.preference_offset"),
                            str(raw.get("name", "")))


def _parse_network(raw: dict, limits: dict, n: int) -> FeederNetwork:
    nodes, users = [], {}
    for k, node in enumerate(_require(raw, "nodes", "network")):
        nid = int(_require(node, "id", f"network.nodes[{k}]"))
        nodes.append(nid)
        if node.get("user") is not None:
            u = int(node["user"])
            if not 1 <= u <= n:
                raise ScenarioError(f"network.nodes[{k}].user: {u} outside [1, {n}]")
            users[nid] = u - 1
    lines = []
    for k, ln in enumerate(_require(raw, "lines", "network")):
        p = f"network.lines[{k}]"
        lines.append(Line(int(_require(ln, "node", p)), int(_require(ln, "parent", p)),
                          _number(_require(ln, "r_pu", p), f"{p}.r_pu"),
                          _number(_require(ln, "s_max_kw", p), f"{p}.s_max_kw"), str(ln.get("name", ""))))
    if len(users) != n:
        raise ScenarioError(f"network.nodes: {len(users)} users placed, expected {n}")
    return FeederNetwork(tuple(nodes), tuple(lines), users,
                         _number(limits.get("v0_pu", 1.0), "limits.v0_pu"),
                         _number(limits.get("v_min_pu", 0.95), "limits.v_min_pu"),
                         _number(limits.get("v_max_pu", 1.05), "limits.v_max_pu"),
                         _number(raw.get("s_base_kva", 1000.0), "network.s_base_kva", positive=True))


def load_scenario(path="default") -> DRScenario:
    """Read and validate a scenario file; ``"default"`` selects the bundled feeder."""
    src = DEFAULT_SCENARIO if str(path) == "default" else Path(path)
    try:
        raw = json.loads(Path(src).read_text(encoding="utf-8"))
    except OSError as e:
        raise ScenarioError(f"cannot read scenario {src}: {e}") from None
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{src}: invalid JSON ({e})") from None
    return parse_scenario(raw, str(src))


def parse_scenario(raw: dict, source: str = "") -> DRScenario:
    n = int(_require(raw, "users", "scenario"))
    v = int(raw.get("periods", 3))
    if n < 1 or v < 1:
        raise ScenarioError("scenario.users and scenario.periods must be positive")
    clusters = tuple(_parse_cluster(c, f"clusters[{k}]") for k, c in enumerate(_require(raw, "clusters", "scenario")))
    if not clusters:
        raise ScenarioError("clusters: need at least one cluster")
    for k, c in enumerate(clusters):
        try:
            c.validate(v)
        except ScenarioError as e:
            raise ScenarioError(f"clusters[{k}]: {e}") from None

    groups_raw = raw.get("groups") or [list(range(1, n + 1))]
    groups = tuple(tuple(int(u) - 1 for u in g) for g in groups_raw)
    if sorted(u for g in groups for u in g) != list(range(n)):
        raise ScenarioError("groups: every user 1..n must appear in exactly one group")
    levels = tuple(_number(x, f"price_levels[{k}]", positive=True) for k, x in enumerate(raw.get("price_levels", [2, 5])))
    if not levels:
        raise ScenarioError("price_levels: empty")

    network = _parse_network(_require(raw, "network", "scenario"), raw.get("limits", {}), n)

    learn = raw.get("learning", {})
    horizon = int(learn.get("T", 365))
    if horizon < 0:
        raise ScenarioError("learning.T: must be nonnegative")
    t_prime = learn.get("T_prime")
    if t_prime is not None and horizon > 0 and not 1 <= int(t_prime) <= horizon:
        raise ScenarioError(f"learning.T_prime: {t_prime} outside [1, {horizon}]")
    sigma_raw = learn.get("sigma", SIGMA_DEFAULTS)
    if isinstance(sigma_raw, dict):
        sigma = {k: _number(sigma_raw.get(k, d), f"learning.sigma.{k}") for k, d in SIGMA_DEFAULTS.items()}
    else:
        s = _number(sigma_raw, "learning.sigma")
        sigma = {k: s for k in SIGMA_DEFAULTS}
    if min(sigma.values()) < 0:
        raise ScenarioError("learning.sigma: must be nonnegative")

    truth = raw.get("truth", {})
    theta_range = tuple(_number(x, "truth.theta_range") for x in truth.get("theta_range", [0.5, 1.0]))
    b_range = tuple(_number(x, "truth.b_range") for x in truth.get("b_range", [0.0, 1.0]))
    if len(theta_range) != 2 or not 0 <= theta_range[0] <= theta_range[1] or theta_range[1] <= 0:
        raise ScenarioError("truth.theta_range: need 0 <= lo <= hi, hi > 0")
    if len(b_range) != 2 or not 0 <= b_range[0] <= b_range[1]:
        raise ScenarioError("truth.b_range: need 0 <= lo <= hi")
    norm_bound = _number(learn.get("S", theta_range[1] * np.sqrt(len(clusters))), "learning.S", positive=True)

    constraints = build_constraints(network)
    zeta = learn.get("zeta")
    margin = 0.05 * float(np.min(constraints.limits)) if zeta is None else _number(zeta, "learning.zeta")
    delta = _number(learn.get("delta", 0.01), "learning.delta")
    if not 0 < delta < 1:
        raise ScenarioError("learning.delta: must lie in (0, 1)")

    return DRScenario(n, v, clusters, groups, levels, network, horizon,
                      None if t_prime is None else int(t_prime),
                      _number(learn.get("nu", 10.0), "learning.nu", positive=True), delta, sigma, margin,
                      norm_bound, theta_range, b_range, int(truth.get("seed", 0)), source)
