"""Ground-truth price response: basis functions, parametric response, noisy draws."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

PRICE_FLOOR = 1e-6


class DomainError(ValueError):
    """Price outside the domain declared by a basis function."""


class BasisFunction:
    """Map a length-V price profile to a V x m matrix whose row v is h_v(price).

    Subclasses implement ``_batch`` on an (N, V) array of prices. Entries must
    be nonnegative and non-increasing in every price coordinate.
    """

    periods: int
    dim: int
    positive_domain: bool = False

    def check_domain(self, prices: np.ndarray) -> None:
        if not np.all(np.isfinite(prices)):
            raise DomainError("prices must be finite")
        if self.positive_domain and np.any(prices <= 0):
            raise DomainError(f"prices must be strictly positive, got min {prices.min():g}")

    def batch(self, prices) -> np.ndarray:
        prices = np.atleast_2d(np.asarray(prices, dtype=float))
        if prices.shape[-1] != self.periods:
            raise DomainError(f"expected {self.periods} periods, got {prices.shape[-1]}")
        self.check_domain(prices)
        return self._batch(prices)

    def __call__(self, price) -> np.ndarray:
        return self.batch(np.asarray(price, dtype=float).reshape(1, -1))[0]

    def _batch(self, prices: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class CallableBasis(BasisFunction):
    """Basis built from a plain function ``fn(price) -> (V, m)`` array."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], periods: int, dim: int,
                 positive_domain: bool = False):
        self.fn = fn
        self.periods = periods
        self.dim = dim
        self.positive_domain = positive_domain

    def _batch(self, prices):
        out = np.empty((prices.shape[0], self.periods, self.dim))
        for k, p in enumerate(prices):
            out[k] = np.asarray(self.fn(p), dtype=float).reshape(self.periods, self.dim)
        return out


class PowerBasis(BasisFunction):
    """Scalar basis h(price) = price**(-power) on the positive reals (V = m = 1).

    ``power=1`` gives x = theta / price, whose profit-maximizing utility is
    theta * log(x).
    """

    periods = 1
    dim = 1
    positive_domain = True

    def __init__(self, power: float = 1.0):
        self.power = power

    def _batch(self, prices):
        return (prices ** -self.power)[:, :, None]


@dataclass(frozen=True)
class ResponseModel:
    basis: BasisFunction
    theta_true: np.ndarray
    norm_bound: float

    def __post_init__(self):
        theta = np.asarray(self.theta_true, dtype=float)
        object.__setattr__(self, "theta_true", theta)
        if theta.shape != (self.basis.dim,):
            raise ValueError(f"theta_true must have shape ({self.basis.dim},)")
        if not np.any(theta != 0):
            raise ValueError("theta_true must be nonzero")
        if np.linalg.norm(theta) > self.norm_bound * (1 + 1e-12):
            raise ValueError("||theta_true|| exceeds norm_bound")


@dataclass
class NoiseSource:
    """Gaussian noise with standard deviation ``sigma`` from a seeded stream."""

    sigma: float
    seed: int | np.random.SeedSequence | None = None
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        self.rng = np.random.default_rng(self.seed)

    def draw(self, size) -> np.ndarray:
        return self.sigma * self.rng.standard_normal(size)


@dataclass(frozen=True)
class Observation:
    user: int
    consumption: np.ndarray


def mean_consumption(model: ResponseModel, price) -> np.ndarray:
    """Expected consumption H(price) @ theta for a single price profile."""
    return model.basis(price) @ model.theta_true


def observe(model: ResponseModel, noise: NoiseSource, price, user: int = 0) -> Observation:
    mean = mean_consumption(model, price)
    return Observation(user, mean + noise.draw(mean.shape))


def smoothed_response(basis: BasisFunction, theta, prices, offset: float) -> np.ndarray:
    """Central-perturbation average of the response for a batch of prices.

    ``theta`` is either one m-vector shared by every row or an (N, m) array.
    Perturbed prices below ``PRICE_FLOOR`` are clamped when the basis requires
    positive prices.
    """
    prices = np.atleast_2d(np.asarray(prices, dtype=float))
    n, v = prices.shape
    eye = offset * np.eye(v)
    shifted = np.concatenate([prices[:, None, :] + eye, prices[:, None, :] - eye], axis=1)
    if basis.positive_domain:
        shifted = np.maximum(shifted, PRICE_FLOOR)
    h = basis.batch(shifted.reshape(-1, v)).reshape(n, 2 * v, v, basis.dim)
    h_mean = h.mean(axis=1)
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1:
        return h_mean @ theta
    return np.einsum("nvm,nm->nv", h_mean, theta)


def smoothed_mean(model: ResponseModel, price, offset: float) -> np.ndarray:
    if offset <= 0:
        raise ValueError("smoothing offset must be positive")
    return smoothed_response(model.basis, model.theta_true, price, offset)[0]


@dataclass
class Environment:
    """Hidden per-user models with one noise stream per user."""

    models: list[ResponseModel]
    noises: list[NoiseSource]

    def __post_init__(self):
        if len(self.models) != len(self.noises):
            raise ValueError("need one noise source per model")

    @classmethod
    def build(cls, bases, thetas, norm_bound, sigma: float, seed=None) -> "Environment":
        thetas = np.asarray(thetas, dtype=float)
        seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        seqs = seq.spawn(len(thetas))
        bounds = np.broadcast_to(np.asarray(norm_bound, dtype=float), (len(thetas),))
        models = [ResponseModel(bases[i], thetas[i], float(bounds[i])) for i in range(len(thetas))]
        return cls(models, [NoiseSource(sigma, s) for s in seqs])

    @property
    def users(self) -> int:
        return len(self.models)

    @property
    def bases(self) -> list[BasisFunction]:
        return [m.basis for m in self.models]

    def mean(self, prices) -> np.ndarray:
        """(n, V) noiseless consumption; users sharing a basis are evaluated in one batch."""
        prices = np.asarray(prices, dtype=float)
        out = np.empty(prices.shape)
        by_basis: dict[int, list[int]] = {}
        for i, m in enumerate(self.models):
            by_basis.setdefault(id(m.basis), []).append(i)
        for rows in by_basis.values():
            h = self.models[rows[0]].basis.batch(prices[rows])
            thetas = np.stack([self.models[i].theta_true for i in rows])
            out[rows] = np.einsum("nvm,nm->nv", h, thetas)
        return out

    def noise(self, periods: int) -> np.ndarray:
        """(n, V) noise, one draw from each user's own stream."""
        return np.stack([src.draw(periods) for src in self.noises])

    def observe(self, prices) -> np.ndarray:
        mean = self.mean(prices)
        return mean + self.noise(mean.shape[1])
