from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .safety import SafetyCertificate


@dataclass
class ExperimentTrace:
    """Per-step record of one run. Arrays are indexed by step first."""

    algorithm: str
    joint: np.ndarray              # (T, G) option index per group
    group_prices: np.ndarray       # (T, G, V)
    observations: np.ndarray       # (T, n, V) noisy consumption
    mean_consumption: np.ndarray   # (T, n, V) noiseless response at the broadcast price
    certificates: list[SafetyCertificate]
    explore: np.ndarray            # (T,) bool
    fallback: np.ndarray           # (T,) bool, OFU step with an empty safe set
    optimistic_value: np.ndarray   # (T,) nan on exploration steps
    exploration_steps: int
    seed: int | None = None
    regret: np.ndarray | None = None
    wall_clock: float = 0.0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.joint)

    @property
    def safe(self) -> np.ndarray:
        return np.array([c.safe for c in self.certificates], dtype=bool)

    @property
    def margins(self) -> np.ndarray:
        return np.array([c.margin for c in self.certificates], dtype=float)

    @classmethod
    def empty(cls, algorithm: str, groups: int, users: int, periods: int, seed=None) -> "ExperimentTrace":
        return cls(algorithm, np.zeros((0, groups), dtype=int), np.zeros((0, groups, periods)),
                   np.zeros((0, users, periods)), np.zeros((0, users, periods)), [],
                   np.zeros(0, dtype=bool), np.zeros(0, dtype=bool), np.zeros(0), 0, seed,
                   regret=np.zeros(0))
