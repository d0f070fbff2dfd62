"""Scenario and per-instant problem containers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .assemble import MgForecast, mg_forecast_from_samples
from .errors import InvalidInputError
from .model import DisturbanceSample, GridGraph, MicrogridSpec


@dataclass(frozen=True)
class SolverSettings:
    """Algorithm parameters; file values can be overridden per run."""

    rho: float = 1e3        # consensus penalty
    tau: float = 0.3        # consensus relaxation step, in (0, 1/2)
    eps_term: float = 1e-5  # consensus termination residual
    nu_max: int = 5000      # consensus iteration cap
    gamma: float = 1.0      # cost discount, in (0, 1]
    Ts: float = 0.5         # sampling time, hours
    H: int = 12             # prediction horizon (H+1 stage costs)
    qp_tol: float = 1e-8
    qp_max_iter: int = 50_000
    dd_alpha0: float = 50.0  # dual-decomposition step seed, alpha0/sqrt(nu)
    dd_prox: float = 1.0     # dual-decomposition proximal weight

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise InvalidInputError("gamma must lie in (0, 1]")
        if not 0.0 < self.tau < 0.5:
            raise InvalidInputError("tau must lie in (0, 1/2)")
        if self.rho <= 0.0 or self.Ts <= 0.0 or self.H < 0:
            raise InvalidInputError("rho and Ts must be positive, H >= 0")


@dataclass(frozen=True)
class Scenario:
    """Static problem data: fleet, grid, initial energies, defaults."""

    specs: tuple[MicrogridSpec, ...]
    graph: GridGraph
    x0: dict[int, np.ndarray]
    settings: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        object.__setattr__(self, "specs",
                           tuple(sorted(self.specs, key=lambda m: m.id)))
        object.__setattr__(
            self, "x0",
            {j: np.asarray(v, dtype=float) for j, v in self.x0.items()})

    def mg(self, j: int) -> MicrogridSpec:
        for m in self.specs:
            if m.id == j:
                return m
        raise InvalidInputError(f"unknown microgrid {j}")

    def with_settings(self, **kw) -> "Scenario":
        return replace(self, settings=replace(self.settings, **kw))


@dataclass(frozen=True)
class Instance:
    """One MPC instant: forecasts and initial storage for every microgrid."""

    specs: tuple[MicrogridSpec, ...]
    graph: GridGraph
    forecasts: dict[int, MgForecast]
    x0: dict[int, np.ndarray]
    gamma: float
    Ts: float

    @property
    def horizon(self) -> int:
        any_fc = next(iter(self.forecasts.values()))
        return any_fc.steps - 1

    def mg(self, j: int) -> MicrogridSpec:
        for m in self.specs:
            if m.id == j:
                return m
        raise InvalidInputError(f"unknown microgrid {j}")


def make_instance(scenario: Scenario, samples: list[DisturbanceSample],
                  x0: dict[int, np.ndarray] | None = None) -> Instance:
    """Build a per-instant problem from horizon-long forecast samples."""
    x0 = scenario.x0 if x0 is None else x0
    fcs = {mg.id: mg_forecast_from_samples(mg, samples)
           for mg in scenario.specs}
    return Instance(specs=scenario.specs, graph=scenario.graph, forecasts=fcs,
                    x0={j: np.asarray(v, dtype=float) for j, v in x0.items()},
                    gamma=scenario.settings.gamma, Ts=scenario.settings.Ts)
