"""Regularized least squares and confidence-ellipsoid geometry."""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np


@dataclass(frozen=True)
class RlsState:
    """Ridge regression sufficient statistics.

    ``gram`` is nu*I plus the sum of feature outer products, ``moment`` the
    sum of features times observations.
    """

    dim: int
    regularizer: float
    gram: np.ndarray
    moment: np.ndarray
    sample_count: int = 0

    @classmethod
    def initial(cls, dim: int, regularizer: float) -> "RlsState":
        if dim < 1:
            raise ValueError("dim must be positive")
        if regularizer <= 0:
            raise ValueError("regularizer must be positive")
        return cls(dim, float(regularizer), regularizer * np.eye(dim), np.zeros(dim), 0)


def update(state: RlsState, features, observation) -> RlsState:
    """Add one rank-one term, or several when ``features`` is (k, m)."""
    h = np.asarray(features, dtype=float)
    y = np.asarray(observation, dtype=float)
    if h.ndim == 1:
        h = h[None, :]
        y = y.reshape(1)
    if h.shape[1] != state.dim or y.shape != (h.shape[0],):
        raise ValueError(f"feature/observation shapes {h.shape}/{y.shape} do not match dim {state.dim}")
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(y))):
        raise ValueError("features and observations must be finite")
    return RlsState(
        state.dim,
        state.regularizer,
        state.gram + h.T @ h,
        state.moment + h.T @ y,
        state.sample_count + h.shape[0],
    )


def center(state: RlsState) -> np.ndarray:
    return np.linalg.solve(state.gram, state.moment)


@dataclass(frozen=True)
class BetaSchedule:
    sigma: float
    dim: int
    regularizer: float
    norm_bound: float
    confidence: float
    users: int = 1
    basis_bound: float = 1.0

    def __post_init__(self):
        if not 0 < self.confidence < 1:
            raise ValueError("confidence delta must lie in (0, 1)")
        for name in ("dim", "regularizer", "norm_bound", "users", "basis_bound"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


def sqrt_beta(schedule: BetaSchedule, t: int) -> float:
    s = schedule
    ratio = (1 + t * s.basis_bound ** 2 / s.regularizer) / (s.confidence / s.users)
    return s.sigma * math.sqrt(s.dim * math.log(ratio)) + math.sqrt(s.regularizer) * s.norm_bound


def beta(schedule: BetaSchedule, t: int) -> float:
    """Squared confidence radius after ``t`` observations (t >= 0)."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    return sqrt_beta(schedule, t) ** 2


@dataclass(frozen=True)
class ConfidenceEllipsoid:
    center: np.ndarray
    gram: np.ndarray
    radius: float
    nonneg_clip: bool = False

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")

    @classmethod
    def from_state(cls, state: RlsState, radius: float, nonneg_clip: bool = False):
        return cls(center(state), state.gram, float(radius), nonneg_clip)

    def dual_norms(self, directions) -> np.ndarray:
        """||a||_{V^-1} for each row of ``directions``."""
        a = np.atleast_2d(np.asarray(directions, dtype=float))
        chol = np.linalg.cholesky(self.gram)
        z = np.linalg.solve(chol, a.T)
        return np.sqrt(np.sum(z * z, axis=0))

    def bounds(self, directions):
        """Vectorized (support_max, support_min) over the rows of ``directions``."""
        a = np.atleast_2d(np.asarray(directions, dtype=float))
        mid = a @ self.center
        width = self.radius * self.dual_norms(a)
        upper = mid + width
        lower = mid - width
        if self.nonneg_clip:
            lower = np.where(np.all(a >= 0, axis=1), np.maximum(lower, 0.0), lower)
        return upper, lower


def _check_dim(ell: ConfidenceEllipsoid, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != ell.center.shape:
        raise ValueError(f"dimension mismatch: {v.shape} vs {ell.center.shape}")
    return v


def support_max(ell: ConfidenceEllipsoid, direction) -> float:
    a = _check_dim(ell, direction)
    return float(ell.bounds(a)[0][0])


def support_min(ell: ConfidenceEllipsoid, direction) -> float:
    a = _check_dim(ell, direction)
    return float(ell.bounds(a)[1][0])


def contains(ell: ConfidenceEllipsoid, point, tol: float = 1e-9) -> bool:
    p = _check_dim(ell, point)
    d = p - ell.center
    dist = math.sqrt(max(float(d @ ell.gram @ d), 0.0))
    inside = dist <= ell.radius + tol * max(1.0, ell.radius)
    if ell.nonneg_clip:
        inside = inside and bool(np.all(p >= -tol))
    return inside


def min_eig(matrix, rtol: float = 1e-8) -> float:
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("matrix must be square")
    scale = max(float(np.max(np.abs(m))), 1.0)
    if np.max(np.abs(m - m.T)) > rtol * scale:
        raise ValueError("matrix is not symmetric")
    return float(np.linalg.eigvalsh(0.5 * (m + m.T))[0])
