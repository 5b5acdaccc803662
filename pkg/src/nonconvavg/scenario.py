"""Runtime scenario: process, field, time scales and grid wired together."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .dynamics import (
    AveragedPath,
    ScenarioGrid,
    TrajectoryBundle,
    integrate_averaged,
    integrate_slow_batch,
    simulate_bundle,
)
from .fast_process import DyadicMapSpec, FiniteChainSpec, sample_path, stationary_law
from .field import DecomposedField, FieldSpec, decompose_field
from .time_scales import TimeScaleFamily

__all__ = ["Scenario", "derive_seed"]


def derive_seed(base_seed: int, *index: int) -> int:
    """Deterministic 63-bit seed for ``(base_seed, *index)``."""
    state = np.random.SeedSequence([int(base_seed), *map(int, index)]).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))


@dataclass(eq=False)
class Scenario:
    """Everything needed to simulate one realization at a given eps.

    ``track_slow`` switches off the slow-motion integration, which is the
    expensive part when a superlinear scale makes the fast horizon huge.
    """

    name: str
    process: FiniteChainSpec | DyadicMapSpec
    field: FieldSpec
    family: TimeScaleFamily
    T_final: float = 1.0
    output_times: np.ndarray = field(default_factory=lambda: np.array([0.5, 1.0]))
    x0: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    track_slow: bool = True
    h: float | None = None
    slow_step: float = 1e-2
    batch_size: int = 200

    def __post_init__(self):
        self.output_times = np.asarray(self.output_times, dtype=float).ravel()
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if self.x0.shape != (self.field.d,):
            raise ValueError(f"x0 has shape {self.x0.shape}, field dimension is {self.field.d}")
        if self.field.ell != self.family.ell:
            raise ValueError(f"field has l = {self.field.ell} blocks, time-scale family has {self.family.ell}")
        if self.field.wp != self.process.dim:
            raise ValueError(f"field expects xi in R^{self.field.wp}, process has dimension {self.process.dim}")
        if self.process.is_discrete and not all(float(a) == int(a) for a in self.family.alphas):
            raise ValueError("discrete-time processes need integer linear rates")

    @property
    def time_kind(self) -> str:
        return "discrete" if self.process.is_discrete else "continuous"

    @cached_property
    def mu(self):
        return stationary_law(self.process)

    @cached_property
    def decomposed(self) -> DecomposedField:
        return decompose_field(self.field, self.mu)

    @property
    def slow_horizon(self) -> float:
        """Slow-time range needed by the covariance formulas: ``T * alpha_k / alpha_1``."""
        a = self.family.alpha_floats
        return float(self.T_final * a[-1] / a[0])

    @cached_property
    def zbar(self) -> AveragedPath:
        return integrate_averaged(self.decomposed.bar_B, self.T_final, self.x0, t_max=self.slow_horizon)

    def grid(self, epsilon: float) -> ScenarioGrid:
        h = None
        if self.h is not None:
            h = min(self.h, self.T_final / (100 * epsilon))
        return ScenarioGrid(epsilon, self.T_final, self.output_times, h, self.slow_step)

    def path_horizon(self, epsilon: float) -> float:
        return float(self.family.q(self.family.ell, self.T_final / epsilon)) + 1.0

    def simulate(self, epsilon: float, seeds: Sequence[int]) -> list[TrajectoryBundle]:
        """Bundles for the given seeds, in order."""
        grid = self.grid(epsilon)
        horizon = self.path_horizon(epsilon)
        zbar = self.zbar
        out = []
        for lo in range(0, len(seeds), self.batch_size):
            chunk = seeds[lo:lo + self.batch_size]
            paths = [sample_path(self.process, horizon, s) for s in chunk]
            slows = integrate_slow_batch(self.field, paths, self.family, grid, self.x0, zbar) if self.track_slow else [None] * len(paths)
            for p, sl in zip(paths, slows):
                out.append(simulate_bundle(self.decomposed, p, self.family, grid, self.x0, zbar, track_slow=False, slow=sl))
        return out

    def describe(self) -> dict:
        return {
            "name": self.name,
            "process": type(self.process).__name__,
            "time_kind": self.time_kind,
            "field": self.field.name,
            "family": self.family.describe(),
            "T_final": self.T_final,
            "output_times": self.output_times.tolist(),
            "x0": self.x0.tolist(),
            "track_slow": self.track_slow,
        }
