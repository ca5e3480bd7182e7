"""Safe utility maximization: utilities implied by profit-maximizing price response.

The utility of consumption x is recovered by integrating the inverse of the
(smoothed) price response along the straight path from an anchor x0, using a
midpoint Riemann sum.
"""

from __future__ import annotations

from dataclasses import dataclass
import itertools
import weakref

import numpy as np

from .estimator import ConfidenceEllipsoid
from .response import PRICE_FLOOR, BasisFunction, Environment, smoothed_response
from .safety import ConstraintSet, PriceGrid, certify_from_load, option_features
from .spr_policy import OptimisticChoice, ellipsoid_bounds, group_values, run_safe_pricing, select_optimistic
from .trace import ExperimentTrace


class InverseResponseError(RuntimeError):
    """No price reproduces the requested consumption within tolerance."""


@dataclass
class SumConfig:
    horizon: int
    exploration: int | None = None
    delta: float = 0.01
    nu: float = 10.0
    sigma: float = 3.0
    norm_bound: float = 1.0
    basis_bound: float | None = None
    margin: float = 0.0
    nonneg_clip: bool = False
    fixed_radius: float | None = None
    seed: int | np.random.SeedSequence | None = None
    riemann_segments: int = 5
    anchor: np.ndarray | float = 1.0
    smoothing: float = 1.0
    root_tol: float = 1e-6
    theta_floor: float = 0.1
    max_iter: int = 200

    def __post_init__(self):
        from .spr_policy import exploration_horizon

        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        self.exploration = exploration_horizon(self.horizon, self.exploration) if self.horizon else 0
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.riemann_segments < 1:
            raise ValueError("riemann_segments must be at least 1")
        if np.any(np.asarray(self.anchor) <= 0):
            raise ValueError("anchor consumption must be strictly positive")
        if self.smoothing < 0 or self.root_tol <= 0 or self.theta_floor <= 0:
            raise ValueError("smoothing must be >= 0; root_tol and theta_floor > 0")


class InverseSolver:
    """Least-squares inverse of the smoothed response x~(price; theta).

    Each target is solved from a few starting prices picked on a fixed lattice
    (mean level x deviation shape) by direction of the response vector. From
    each start the price level is matched along the all-ones direction, where
    total consumption is monotone, and the result is polished by damped
    Gauss-Newton with a forward-difference Jacobian. The best start wins;
    ties go to the lowest lattice index, so results are deterministic.
    """

    def __init__(self, basis: BasisFunction, offset: float = 1.0, *, price_range=(0.05, 20.0),
                 levels: int = 12, shape_step: float = 0.25, shape_span: float = 3.0,
                 starts: int = 3, max_iter: int = 200):
        if not basis.positive_domain:
            raise ValueError("inverse response needs a basis declared on positive prices")
        self.basis = basis
        self.offset = float(offset)
        self.starts = starts
        self.max_iter = max_iter
        v = basis.periods
        if v == 1:
            lattice = np.array([[1.0]])
        else:
            unit = self.offset if self.offset > 0 else 1.0
            ticks = np.arange(-shape_span, shape_span + 1e-9, shape_step) * unit
            shapes = np.array(list(itertools.product(ticks, repeat=v - 1)))
            shapes = np.hstack([shapes, np.zeros((len(shapes), 1))])
            shapes -= shapes.mean(axis=1, keepdims=True)
            means = np.geomspace(price_range[0], price_range[1], levels)
            lattice = (means[:, None, None] + shapes[None]).reshape(-1, v)
            lattice = lattice[np.all(lattice > 0, axis=1)]
        self.lattice = lattice
        # response is linear in theta: cache the smoothed basis at every lattice point
        self.lattice_basis = np.stack(
            [smoothed_response(basis, e, lattice, self.offset) for e in np.eye(basis.dim)], axis=-1)

    def response(self, theta, prices) -> np.ndarray:
        return smoothed_response(self.basis, theta, np.maximum(prices, PRICE_FLOOR), self.offset)

    def _pick_starts(self, theta, targets):
        if len(self.lattice) == 1:
            return np.zeros((len(targets), 1), dtype=int)
        lat = self.lattice_basis
        if theta.ndim == 1:
            x = lat @ theta
            xn = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-300)
            tn = targets / np.maximum(np.linalg.norm(targets, axis=1, keepdims=True), 1e-300)
            # rows of xn and tn are unit vectors, so distance ranks by cosine
            score = -(tn @ xn.T)
        else:
            x = np.einsum("lvm,nm->nlv", lat, theta)
            xn = x / np.maximum(np.linalg.norm(x, axis=2, keepdims=True), 1e-300)
            tn = targets / np.maximum(np.linalg.norm(targets, axis=1, keepdims=True), 1e-300)
            score = -np.einsum("nlv,nv->nl", xn, tn)
        k = min(self.starts, len(self.lattice))
        part = np.argpartition(score, k - 1, axis=1)[:, :k]
        # stable order among the k best: by score, then lattice index
        order = np.lexsort((part, np.take_along_axis(score, part, axis=1)), axis=1)
        return np.take_along_axis(part, order, axis=1)

    def _level_match(self, theta, p0, total, budget):
        """Shift each start along the all-ones direction until total
        consumption matches (Illinois regula falsi on a monotone bracket)."""
        n = len(p0)

        def f(rows, c):
            th = theta if theta.ndim == 1 else theta[rows]
            return self.response(th, p0[rows] + c[:, None]).sum(axis=1) - total[rows]

        allr = np.arange(n)
        lo = PRICE_FLOOR - p0.min(axis=1)
        f_lo = f(allr, lo)
        hi = np.maximum(lo + 1.0, 0.0)
        f_hi = f(allr, hi)
        for _ in range(budget):
            bad = np.flatnonzero(f_hi > 0)
            if not len(bad):
                break
            hi[bad] = lo[bad] + 2.0 * (hi[bad] - lo[bad])
            f_hi[bad] = f(bad, hi[bad])
        # target above the reachable maximum: stay at the price floor
        c = np.where(f_lo <= 0, lo, hi)
        active = f_lo > 0
        side = np.zeros(n)
        for _ in range(budget):
            a = np.flatnonzero(active)
            if not len(a):
                break
            cm = hi[a] - f_hi[a] * (hi[a] - lo[a]) / (f_hi[a] - f_lo[a])
            bad = (cm <= lo[a]) | (cm >= hi[a]) | ~np.isfinite(cm)
            cm = np.where(bad, 0.5 * (lo[a] + hi[a]), cm)
            fm = f(a, cm)
            pos = fm > 0
            ia, ib = a[pos], a[~pos]
            lo[ia], f_lo[ia] = cm[pos], fm[pos]
            f_hi[ia] = np.where(side[ia] == 1, 0.5 * f_hi[ia], f_hi[ia])
            side[ia] = 1
            hi[ib], f_hi[ib] = cm[~pos], fm[~pos]
            f_lo[ib] = np.where(side[ib] == -1, 0.5 * f_lo[ib], f_lo[ib])
            side[ib] = -1
            c[a] = cm
            done = (np.abs(fm) <= 1e-14 * np.maximum(total[a], 1e-300)) | (hi[a] - lo[a] <= 1e-15 * (1 + np.abs(cm)))
            active[a[done]] = False
        return p0 + c[:, None]

    def _polish(self, theta, p, targets, tol, budget):
        n, v = p.shape
        h = 1e-7
        steps = np.vstack([np.zeros(v), h * np.eye(v)])
        lam = np.full(n, 1e-6)
        r = self.response(theta, p) - targets
        cost = np.sum(r * r, axis=1)
        active = np.max(np.abs(r), axis=1) > 1e-3 * tol
        for _ in range(budget):
            a = np.flatnonzero(active)
            if not len(a):
                break
            th = theta if theta.ndim == 1 else np.repeat(theta[a], v + 1, axis=0)
            probe = (p[a][:, None, :] + steps).reshape(-1, v)
            res = (self.response(th, probe).reshape(len(a), v + 1, v) - targets[a][:, None, :])
            jac = np.swapaxes(res[:, 1:, :] - res[:, :1, :], 1, 2) / h
            r0 = res[:, 0, :]
            jtj = np.swapaxes(jac, 1, 2) @ jac
            grad = np.einsum("nvk,nv->nk", jac, r0)
            scale = np.trace(jtj, axis1=1, axis2=2) / v + 1e-300
            step = -np.linalg.solve(jtj + (lam[a] * scale)[:, None, None] * np.eye(v), grad[..., None])[..., 0]
            trial = np.maximum(p[a] + step, 0.5 * p[a])
            th = theta if theta.ndim == 1 else theta[a]
            r_new = self.response(th, trial) - targets[a]
            c_new = np.sum(r_new * r_new, axis=1)
            ok = c_new < cost[a]
            gain = cost[a] - c_new
            acc = a[ok]
            p[acc] = trial[ok]
            r[acc] = r_new[ok]
            cost[acc] = c_new[ok]
            lam[a] = np.where(ok, 0.1 * lam[a], 10.0 * lam[a])
            done = (np.max(np.abs(r[a]), axis=1) <= 1e-3 * tol) | (ok & (gain <= 1e-9 * (cost[a] + gain))) | (lam[a] > 1e6)
            active[a[done]] = False
        return p, np.max(np.abs(r), axis=1), cost

    def solve(self, theta, targets, tol: float = 1e-6, strict: bool = True):
        """Prices (N, V) whose smoothed response best matches ``targets`` (N, V).

        Returns (prices, residuals) with sup-norm residuals. With ``strict`` a
        residual above ``tol`` raises InverseResponseError.
        """
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        theta = np.asarray(theta, dtype=float)
        if np.any(theta < 0) or not np.all(np.any(np.atleast_2d(theta) > 0, axis=-1)):
            raise ValueError("theta must be nonnegative and nonzero")
        if np.any(targets < 0) or not np.all(np.isfinite(targets)):
            raise ValueError("target consumption must be finite and nonnegative")
        n, v = targets.shape
        k_idx = self._pick_starts(theta, targets)
        k = k_idx.shape[1]
        p0 = self.lattice[k_idx].reshape(-1, v)
        tg = np.repeat(targets, k, axis=0)
        th = theta if theta.ndim == 1 else np.repeat(theta, k, axis=0)
        budget = max(self.max_iter // 2, 1)
        p = self._level_match(th, p0, tg.sum(axis=1), budget)
        p, resid, cost = self._polish(th, p, tg, tol, budget)
        best = np.argmin(cost.reshape(n, k), axis=1)
        rows = np.arange(n) * k + best
        prices, resid = p[rows], resid[rows]
        if strict and np.any(resid > tol):
            worst = int(np.argmax(resid))
            raise InverseResponseError(
                f"inverse response did not converge: residual {resid[worst]:.3g} > tol {tol:g} "
                f"for target {targets[worst]}")
        return prices, resid


class CurveInverse:
    """Least-squares inverse for bases of the form weight(total price) x
    pattern(price differences), such as the appliance basis.

    Patterns are piecewise constant in the price differences, so on each
    cell of equal patterns the smoothed response is a one-dimensional curve
    in the total price s. Cells are enumerated once from a dyadic grid of
    differences (fine enough to hit every cell of the arrangement, including
    ties). A target is then fitted on every curve: coarse scan in s, then
    golden-section refinement of the best few. Prices are kept where no
    smoothing perturbation reaches the price floor, so the curve model is
    exact there. Returned prices are dyadic, which keeps ties exact.
    """

    def __init__(self, basis, offset: float = 1.0, *, span: float = 3.0, s_step: float = 0.25,
                 s_range: float = 32.0, refine: int = 3):
        self.basis = basis
        self.offset = rho = float(offset)
        v = basis.periods
        unit = rho if rho > 0 else 1.0
        ticks = np.arange(-4 * span, 4 * span + 1) / 4.0 * unit
        free = np.array(list(itertools.product(ticks, repeat=v - 1))).reshape(-1, v - 1)
        reps = np.hstack([free, np.zeros((len(free), 1))])
        reps -= reps.min(axis=1, keepdims=True)
        shifts = rho * np.eye(v)
        up = basis.patterns((reps[:, None, :] + shifts).reshape(-1, v)).reshape(len(reps), v, v, -1)
        dn = basis.patterns((reps[:, None, :] - shifts).reshape(-1, v)).reshape(len(reps), v, v, -1)
        plus, minus = up.sum(axis=1) / (2 * v), dn.sum(axis=1) / (2 * v)
        cells: dict = {}
        for k in np.argsort(reps.sum(axis=1), kind="stable"):
            key = np.round(np.concatenate([plus[k].ravel(), minus[k].ravel()]), 9).tobytes()
            cells.setdefault(key, k)       # lowest total spread wins
        idx = np.array(sorted(cells.values()))
        self.reps, self.plus, self.minus = reps[idx], plus[idx], minus[idx]
        floor = (rho + PRICE_FLOOR) if basis.positive_domain else -s_range / v
        self.s_min = self.reps.sum(axis=1) + v * floor
        self.s_grid = self.s_min[:, None] + np.arange(0.0, s_range + 1e-9, s_step)
        self.s_step = s_step
        self.refine = refine

    def _tables(self) -> np.ndarray:
        if not hasattr(self, "_table_cache"):
            wp = self.basis.weights(self.s_grid + self.offset)[:, :, None, :]
            wm = self.basis.weights(self.s_grid - self.offset)[:, :, None, :]
            x = wp * self.plus[:, None] + wm * self.minus[:, None]          # (Q, J, V, m)
            self._table_cache = x.reshape(-1, x.shape[-1])
        return self._table_cache

    def curve(self, theta, q, s) -> np.ndarray:
        """Smoothed response on curve(s) ``q`` at total price(s) ``s``; theta broadcasts."""
        wp = self.basis.weights(s + self.offset)
        wm = self.basis.weights(s - self.offset)
        x = wp[..., None, :] * self.plus[q] + wm[..., None, :] * self.minus[q]
        return np.einsum("...vm,...m->...v", x, theta)

    def solve(self, theta, targets, tol: float = 1e-6, strict: bool = True):
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        theta = np.asarray(theta, dtype=float)
        if np.any(theta < 0) or not np.all(np.any(np.atleast_2d(theta) > 0, axis=-1)):
            raise ValueError("theta must be nonnegative and nonzero")
        if np.any(targets < 0) or not np.all(np.isfinite(targets)):
            raise ValueError("target consumption must be finite and nonnegative")
        n, v = targets.shape
        nq, nj = self.s_grid.shape
        tables = self._tables()                                           # (Q*J*V, m)
        thetas, which = (theta[None], np.zeros(n, dtype=int)) if theta.ndim == 1 else \
            np.unique(theta, axis=0, return_inverse=True)
        cost = np.empty((n, nq, nj))
        for u, th_u in enumerate(thetas):
            rows = np.flatnonzero(which.ravel() == u)
            xs = (tables @ th_u).reshape(nq * nj, v)
            # squared distance expanded so the cross term is one matrix product
            d2 = (np.sum(xs * xs, axis=1)[None, :] - 2.0 * targets[rows] @ xs.T
                  + np.sum(targets[rows] ** 2, axis=1)[:, None])
            cost[rows] = np.maximum(d2, 0.0).reshape(len(rows), nq, nj)
        # best grid point on each curve, then the few best curves
        j_best = np.argmin(cost, axis=2)                                  # (N, Q)
        c_best = np.take_along_axis(cost, j_best[..., None], axis=2)[..., 0]
        k = min(self.refine, nq)
        q_pick = np.argsort(c_best, axis=1, kind="stable")[:, :k]         # (N, k)
        j_pick = np.take_along_axis(j_best, q_pick, axis=1)
        q_flat = q_pick.ravel()
        lo = np.maximum(self.s_grid[q_flat, np.maximum(j_pick.ravel() - 1, 0)], self.s_min[q_flat])
        hi = self.s_grid[q_flat, np.minimum(j_pick.ravel() + 1, nj - 1)]
        th = theta if theta.ndim == 1 else np.repeat(theta, k, axis=0)
        tg = np.repeat(targets, k, axis=0)

        def f(s):
            return np.sum((self.curve(th, q_flat, s) - tg) ** 2, axis=-1)

        s_opt, c_opt = _golden(f, lo, hi)
        best = np.argmin(c_opt.reshape(n, k), axis=1)
        rows = np.arange(n) * k + best
        q, s_fit = q_flat[rows], s_opt[rows]
        level = (s_fit - self.reps[q].sum(axis=1)) / v
        level = np.round(level * 2.0 ** 40) / 2.0 ** 40                  # dyadic: exact ties
        if self.basis.positive_domain:
            level = np.maximum(level, self.offset + PRICE_FLOOR)
        prices = self.reps[q] + level[:, None]
        resid = np.max(np.abs(smoothed_response(self.basis, theta, prices, self.offset) - targets), axis=1)
        if strict and np.any(resid > tol):
            worst = int(np.argmax(resid))
            raise InverseResponseError(
                f"inverse response did not converge: residual {resid[worst]:.3g} > tol {tol:g} "
                f"for target {targets[worst]}")
        return prices, resid


def _golden(f, lo, hi, iters: int = 80):
    """Vectorized golden-section minimization of f on [lo, hi]; the best of
    the final point and both ends is returned."""
    g = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo.copy(), hi.copy()
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        left = fc <= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        d_new = np.where(left, c, a + g * (b - a))
        c_new = np.where(left, b - g * (b - a), d)
        f_new = f(np.where(left, c_new, d_new))
        fc, fd = np.where(left, f_new, fd), np.where(left, fc, f_new)
        c, d = c_new, d_new
        if np.all(b - a <= 1e-13 * (1.0 + np.abs(a))):
            break
    cand = np.stack([0.5 * (a + b), lo, hi])
    vals = np.stack([f(x) for x in cand])
    pick = np.argmin(vals, axis=0)
    cols = np.arange(len(lo))
    return cand[pick, cols], vals[pick, cols]


_SOLVERS: "weakref.WeakKeyDictionary[BasisFunction, dict]" = weakref.WeakKeyDictionary()


def solver_for(basis: BasisFunction, offset: float, max_iter: int = 200):
    """Cached solver per (basis, offset); the lattice setup is the costly part."""
    per_basis = _SOLVERS.setdefault(basis, {})
    key = (float(offset), max_iter)
    if key not in per_basis:
        if hasattr(basis, "patterns") and hasattr(basis, "weights"):
            per_basis[key] = CurveInverse(basis, offset)
        else:
            per_basis[key] = InverseSolver(basis, offset, max_iter=max_iter)
    return per_basis[key]


def inverse_response(basis: BasisFunction, theta, target, tol: float = 1e-6, offset: float = 1.0,
                     strict: bool = True) -> np.ndarray:
    """Price profile whose smoothed response equals ``target`` (offset 0: no smoothing)."""
    prices, _ = solver_for(basis, offset).solve(theta, np.asarray(target, dtype=float)[None], tol, strict)
    return prices[0]


def utility_batch(basis: BasisFunction, theta, consumption, config: SumConfig) -> np.ndarray:
    """Midpoint-rule utility for each row of ``consumption`` (N, V).

    ``theta`` is one m-vector or an (N, m) array. Inverse prices are
    least-squares fits: the smoothed response of a multi-period basis need not
    reach every consumption vector on the integration path.
    """
    x = np.atleast_2d(np.asarray(consumption, dtype=float))
    if np.any(x < 0):
        raise ValueError("consumption must be nonnegative")
    n, v = x.shape
    k = config.riemann_segments
    x0 = np.broadcast_to(np.asarray(config.anchor, dtype=float), (v,))
    delta = (x - x0) / k
    out = np.zeros(n)
    moving = np.flatnonzero(np.any(delta != 0, axis=1))
    if not len(moving):
        return out
    mids = x0 + (np.arange(k)[None, :, None] + 0.5) * delta[moving][:, None, :]
    theta = np.asarray(theta, dtype=float)
    th = theta if theta.ndim == 1 else np.repeat(theta[moving], k, axis=0)
    solver = solver_for(basis, config.smoothing, config.max_iter)
    prices, _ = solver.solve(th, mids.reshape(-1, v), config.root_tol, strict=v == 1)
    out[moving] = np.einsum("nkv,nv->n", prices.reshape(-1, k, v), delta[moving])
    return out


def utility_eval(basis: BasisFunction, theta_check, consumption, config: SumConfig) -> float:
    """Profit-maximizing utility of ``consumption``, zero at the anchor."""
    return float(utility_batch(basis, theta_check, np.asarray(consumption, dtype=float)[None], config)[0])


def select_theta_check(ell: ConfidenceEllipsoid, norm_bound: float, theta_floor: float = 0.1) -> np.ndarray:
    """Deterministic member of the confidence set used to evaluate utilities:
    the center clipped to the nonnegative orthant and pulled into the norm ball."""
    theta = np.maximum(np.asarray(ell.center, dtype=float), 0.0)
    norm = np.linalg.norm(theta)
    if norm > norm_bound:
        theta = theta * (norm_bound / norm)
    if not np.any(theta > 0):
        theta = np.full_like(theta, theta_floor / theta.size)
    return theta


def sum_values(grid: PriceGrid, bases, ellipsoids, upper: np.ndarray, config: SumConfig,
               units: np.ndarray | None = None) -> np.ndarray:
    """(G, O) optimistic SUM utility of every group option.

    Users that share an estimation unit and a basis get identical utilities,
    so each unit is evaluated once and weighted by its member count.
    """
    n, o, v = upper.shape
    units = np.arange(n) if units is None else units
    x_opt = np.maximum(upper, 0.0)
    per_user = np.zeros((n, o))
    reps: dict = {}
    for i in range(n):
        reps.setdefault((units[i], id(bases[i])), []).append(i)
    by_basis: dict = {}
    for members in reps.values():
        by_basis.setdefault(id(bases[members[0]]), []).append(members)
    for groups in by_basis.values():
        basis = bases[groups[0][0]]
        thetas = np.stack([select_theta_check(ellipsoids[g[0]], config.norm_bound, config.theta_floor)
                           for g in groups])
        xs = np.stack([x_opt[g[0]] for g in groups])              # (R, O, V)
        th = np.repeat(thetas, o, axis=0)
        vals = utility_batch(basis, th, xs.reshape(-1, v), config).reshape(len(groups), o)
        for g, row in zip(groups, vals):
            per_user[g] = row
    return group_values(grid, per_user)


def optimistic_step_sum(grid: PriceGrid, ellipsoids, constraints: ConstraintSet, bases, config: SumConfig,
                        features: np.ndarray | None = None, units=None) -> OptimisticChoice | None:
    if features is None:
        features = option_features(grid, bases)
    joint = grid.joint_indices()
    upper, lower = ellipsoid_bounds(features, ellipsoids)
    values = sum_values(grid, bases, ellipsoids, upper, config, units)
    picked = select_optimistic(grid, constraints, joint, upper, lower, values)
    if picked is None:
        return None
    c, value, load = picked
    price = grid.user_prices(joint[c])
    return OptimisticChoice(tuple(int(k) for k in joint[c]), price, value,
                            certify_from_load(constraints, price, load))


def run_sum(env: Environment, constraints: ConstraintSet, grid: PriceGrid, config: SumConfig,
            units=None) -> ExperimentTrace:
    """Run the SUM loop. With ``units`` (e.g. the grid's group labels), users
    in a unit are known to share one response and pool their observations."""
    bases = env.bases
    if units is not None:
        units = np.asarray(units, dtype=int)
        for u in np.unique(units):
            if len({id(bases[i]) for i in np.flatnonzero(units == u)}) != 1:
                raise ValueError("users pooled into one unit must share a basis")

    def scorer(ells, upper, lower):
        return sum_values(grid, bases, ells, upper, config, units)

    return run_safe_pricing("sum", env, constraints, grid, config, scorer, units)
